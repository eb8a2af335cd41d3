//! Embedding + stacked LSTM + tied-projection language model.
//!
//! The model exposes pre-softmax logits per step and the hidden activation
//! of every layer so auxiliary penalties can reach them. Both siamese
//! passes bind the same parameter objects onto one tape, so gradients from
//! the two copies accumulate into shared storage.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masks::{DropScheme, Granularity, MaskSet, Site, SiteKey};
use crate::tensor::{Tape, Tensor, Var};

const CHECKPOINT_MAGIC: &[u8; 4] = b"FDLM";
const CHECKPOINT_VERSION: u32 = 1;

/// Dropout rates per site. Granularities follow the baseline stack:
/// activations are variational (per-sequence) by default, the embedding
/// uses row dropout, the hidden-to-hidden matrix uses weight dropout.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct DropConfig {
    pub input: DropScheme,
    pub inter_layer: DropScheme,
    pub output: DropScheme,
    pub embedding: DropScheme,
    pub weight: DropScheme,
}

impl Default for DropConfig {
    fn default() -> Self {
        let seq = |rate| DropScheme {
            rate,
            granularity: Granularity::PerSequence,
        };
        DropConfig {
            input: seq(0.1),
            inter_layer: seq(0.3),
            output: seq(0.4),
            embedding: DropScheme {
                rate: 0.65,
                granularity: Granularity::EmbeddingRow,
            },
            weight: DropScheme {
                rate: 0.5,
                granularity: Granularity::WeightMatrix,
            },
        }
    }
}

impl DropConfig {
    pub fn none() -> Self {
        let off = |granularity| DropScheme {
            rate: 0.0,
            granularity,
        };
        DropConfig {
            input: off(Granularity::PerSequence),
            inter_layer: off(Granularity::PerSequence),
            output: off(Granularity::PerSequence),
            embedding: off(Granularity::EmbeddingRow),
            weight: off(Granularity::WeightMatrix),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct LmConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub num_layers: usize,
    #[serde(default = "default_true")]
    pub tie_embeddings: bool,
    #[serde(default)]
    pub drop: DropConfig,
}

fn default_true() -> bool {
    true
}

impl LmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.embed_dim == 0 || self.hidden_dim == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.num_layers == 0 {
            return Err(Error::Config("num_layers must be at least 1".into()));
        }
        if self.tie_embeddings && self.embed_dim != self.hidden_dim {
            return Err(Error::Config(format!(
                "tied embeddings require embed_dim == hidden_dim (got {} vs {})",
                self.embed_dim, self.hidden_dim
            )));
        }
        for s in [
            &self.drop.input,
            &self.drop.inter_layer,
            &self.drop.output,
            &self.drop.embedding,
            &self.drop.weight,
        ] {
            if !(0.0..1.0).contains(&s.rate) {
                return Err(Error::InvalidRate { rate: s.rate });
            }
        }
        Ok(())
    }

    fn layer_in_dim(&self, layer: usize) -> usize {
        if layer == 0 {
            self.embed_dim
        } else {
            self.hidden_dim
        }
    }
}

/// One named parameter with its gradient accumulator.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

impl Param {
    fn new(name: impl Into<String>, value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape().to_vec());
        Param {
            name: name.into(),
            value,
            grad,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

/// Parameter layout: `embedding`, then per layer `w_x_l`, `w_h_l`,
/// `bias_l`, then `out_bias` (and `w_out` when untied).
#[derive(Debug, Clone)]
pub struct LmModel {
    pub config: LmConfig,
    pub params: Vec<Param>,
}

impl LmModel {
    /// Uniform(-1/sqrt(d), 1/sqrt(d)) recurrent weights,
    /// uniform(-0.1, 0.1) embeddings, zero biases.
    pub fn init(config: LmConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (m, e, d) = (config.vocab_size, config.embed_dim, config.hidden_dim);
        let mut params = Vec::new();
        let uniform = |rng: &mut ChaCha8Rng, shape: Vec<usize>, bound: f64| {
            let n: usize = shape.iter().product();
            Tensor::new(shape, (0..n).map(|_| rng.gen_range(-bound..bound)).collect()).unwrap()
        };
        params.push(Param::new("embedding", uniform(&mut rng, vec![m, e], 0.1)));
        for l in 0..config.num_layers {
            let in_dim = config.layer_in_dim(l);
            let bound = 1.0 / (d as f64).sqrt();
            params.push(Param::new(
                format!("w_x_{l}"),
                uniform(&mut rng, vec![in_dim, 4 * d], bound),
            ));
            params.push(Param::new(
                format!("w_h_{l}"),
                uniform(&mut rng, vec![d, 4 * d], bound),
            ));
            params.push(Param::new(format!("bias_{l}"), Tensor::zeros(vec![4 * d])));
        }
        params.push(Param::new("out_bias", Tensor::zeros(vec![m])));
        if !config.tie_embeddings {
            params.push(Param::new("w_out", uniform(&mut rng, vec![m, d], 0.1)));
        }
        Ok(LmModel { config, params })
    }

    pub fn param(&self, name: &str) -> &Param {
        self.params
            .iter()
            .find(|p| p.name == name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.zero_grad();
        }
    }

    /// Record every parameter as a leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound {
            vars: self
                .params
                .iter()
                .map(|p| tape.leaf(p.value.clone()))
                .collect(),
        }
    }

    /// Add the tape's leaf gradients into the parameters' accumulators.
    pub fn absorb_grads(&mut self, tape: &Tape, bound: &Bound) {
        for (p, &v) in self.params.iter_mut().zip(&bound.vars) {
            let g = tape.grad(v);
            for (pg, tg) in p.grad.data_mut().iter_mut().zip(g.data()) {
                *pg += tg;
            }
        }
    }

    /// The `(key, scheme, shape)` list of every stochastic site for a
    /// forward pass with this batch size; feed it to [`MaskSet::sample`].
    pub fn mask_sites(&self, batch: usize) -> Vec<(SiteKey, DropScheme, Vec<usize>)> {
        let c = &self.config;
        let mut sites = Vec::new();
        sites.push((
            SiteKey {
                layer: 0,
                site: Site::Embedding,
            },
            c.drop.embedding,
            vec![c.vocab_size, c.embed_dim],
        ));
        for l in 0..c.num_layers {
            let scheme = if l == 0 { c.drop.input } else { c.drop.inter_layer };
            sites.push((
                SiteKey {
                    layer: l,
                    site: Site::Input,
                },
                scheme,
                vec![batch, c.layer_in_dim(l)],
            ));
            sites.push((
                SiteKey {
                    layer: l,
                    site: Site::WeightHh,
                },
                c.drop.weight,
                vec![c.hidden_dim, 4 * c.hidden_dim],
            ));
        }
        sites.push((
            SiteKey {
                layer: c.num_layers - 1,
                site: Site::Output,
            },
            c.drop.output,
            vec![batch, c.hidden_dim],
        ));
        sites
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        let cfg = serde_json::to_vec(&self.config)
            .map_err(|e| Error::Checkpoint(format!("config serialization: {e}")))?;
        w.write_all(&(cfg.len() as u32).to_le_bytes())?;
        w.write_all(&cfg)?;
        w.write_all(&(self.params.len() as u32).to_le_bytes())?;
        for p in &self.params {
            let name = p.name.as_bytes();
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name)?;
            w.write_all(&(p.value.shape().len() as u32).to_le_bytes())?;
            for &d in p.value.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for &v in p.value.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|_| Error::Checkpoint("file too short for header".into()))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic; not a checkpoint".into()));
        }
        let version = read_u32(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "version mismatch: file has {version}, expected {CHECKPOINT_VERSION}"
            )));
        }
        let cfg_len = read_u32(&mut r)? as usize;
        let mut cfg_bytes = vec![0u8; cfg_len];
        r.read_exact(&mut cfg_bytes)
            .map_err(|_| Error::Checkpoint("truncated config block".into()))?;
        let config: LmConfig = serde_json::from_slice(&cfg_bytes)
            .map_err(|e| Error::Checkpoint(format!("config parse: {e}")))?;
        config.validate()?;
        let n_params = read_u32(&mut r)? as usize;
        let mut params = Vec::with_capacity(n_params);
        for _ in 0..n_params {
            let name_len = read_u32(&mut r)? as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)
                .map_err(|_| Error::Checkpoint("truncated parameter name".into()))?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
            let rank = read_u32(&mut r)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                let mut b = [0u8; 8];
                r.read_exact(&mut b)
                    .map_err(|_| Error::Checkpoint("truncated shape".into()))?;
                shape.push(u64::from_le_bytes(b) as usize);
            }
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                let mut b = [0u8; 8];
                r.read_exact(&mut b)
                    .map_err(|_| Error::Checkpoint("truncated parameter data".into()))?;
                data.push(f64::from_le_bytes(b));
            }
            let value = Tensor::new(shape, data)
                .map_err(|e| Error::Checkpoint(format!("invalid parameter {name}: {e}")))?;
            params.push(Param::new(name, value));
        }
        Ok(LmModel { config, params })
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|_| Error::Checkpoint("unexpected end of file".into()))?;
    Ok(u32::from_le_bytes(b))
}

/// Tape handles for one binding of the model's parameters.
pub struct Bound {
    pub vars: Vec<Var>,
}

impl Bound {
    fn var(&self, model: &LmModel, name: &str) -> Var {
        let idx = model
            .params
            .iter()
            .position(|p| p.name == name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        self.vars[idx]
    }
}

/// Per-step prediction and activations.
pub struct StepOutput {
    /// Pre-softmax prediction, shape (batch, vocab).
    pub logits: Var,
    /// Raw LSTM output per layer (before output dropout), shape (batch, d).
    pub hidden: Vec<Var>,
}

/// Detached (h, c) per layer, carried across TBPTT windows.
#[derive(Debug, Clone)]
pub struct Carry {
    pub state: Vec<(Tensor, Tensor)>,
}

impl Carry {
    pub fn zero(config: &LmConfig, batch: usize) -> Self {
        Carry {
            state: (0..config.num_layers)
                .map(|_| {
                    (
                        Tensor::zeros(vec![batch, config.hidden_dim]),
                        Tensor::zeros(vec![batch, config.hidden_dim]),
                    )
                })
                .collect(),
        }
    }
}

/// One LSTM cell step. `wh_masked` is the (possibly weight-dropped)
/// hidden-to-hidden matrix already on the tape.
pub fn lstm_step(
    tape: &mut Tape,
    x: Var,
    state: (Var, Var),
    w_x: Var,
    wh_masked: Var,
    bias: Var,
) -> Result<(Var, Var)> {
    let d = tape.shape(wh_masked)[0];
    let (h_prev, c_prev) = state;
    let gx = tape.matmul(x, w_x)?;
    let gh = tape.matmul(h_prev, wh_masked)?;
    let gsum = tape.add(gx, gh)?;
    let gates = tape.add_row(gsum, bias)?;
    let i_lin = tape.slice_cols(gates, 0, d)?;
    let f_lin = tape.slice_cols(gates, d, d)?;
    let g_lin = tape.slice_cols(gates, 2 * d, d)?;
    let o_lin = tape.slice_cols(gates, 3 * d, d)?;
    let i = tape.sigmoid(i_lin)?;
    let f = tape.sigmoid(f_lin)?;
    let g = tape.tanh(g_lin)?;
    let o = tape.sigmoid(o_lin)?;
    let fc = tape.mul(f, c_prev)?;
    let ig = tape.mul(i, g)?;
    let c = tape.add(fc, ig)?;
    let tc = tape.tanh(c)?;
    let h = tape.mul(o, tc)?;
    Ok((h, c))
}

/// Run the model over one TBPTT window.
///
/// `tokens` is step-major: `tokens[t]` holds the batch's token ids at step
/// `t`. The returned carry is detached, so gradients never cross window
/// boundaries. Tied projection uses the raw (un-dropped) embedding matrix.
pub fn forward(
    tape: &mut Tape,
    model: &LmModel,
    bound: &Bound,
    tokens: &[Vec<usize>],
    masks: &MaskSet,
    carry: &Carry,
) -> Result<(Vec<StepOutput>, Carry)> {
    let c = &model.config;
    let emb = bound.var(model, "embedding");
    let emb_mask = masks.require(0, Site::Embedding)?;
    let emb_mask_var = tape.leaf(emb_mask.at_step(0).clone());
    let emb_masked = tape.mul(emb, emb_mask_var)?;

    // Weight-drop masks are fixed for the whole window.
    let mut wh_masked = Vec::with_capacity(c.num_layers);
    for l in 0..c.num_layers {
        let w_h = bound.var(model, &format!("w_h_{l}"));
        let m = masks.require(l, Site::WeightHh)?;
        let mv = tape.leaf(m.at_step(0).clone());
        wh_masked.push(tape.mul(w_h, mv)?);
    }

    let mut state: Vec<(Var, Var)> = carry
        .state
        .iter()
        .map(|(h, cc)| (tape.leaf(h.clone()), tape.leaf(cc.clone())))
        .collect();

    let out_proj = if c.tie_embeddings {
        emb
    } else {
        bound.var(model, "w_out")
    };
    let out_bias = bound.var(model, "out_bias");
    let out_mask = masks.require(c.num_layers - 1, Site::Output)?;

    let mut outputs = Vec::with_capacity(tokens.len());
    for (t, ids) in tokens.iter().enumerate() {
        let mut x = tape.rows(emb_masked, ids)?;
        let mut hidden = Vec::with_capacity(c.num_layers);
        for l in 0..c.num_layers {
            let in_mask = masks.require(l, Site::Input)?;
            let mv = tape.leaf(in_mask.at_step(t).clone());
            let xm = tape.mul(x, mv)?;
            let w_x = bound.var(model, &format!("w_x_{l}"));
            let bias = bound.var(model, &format!("bias_{l}"));
            let (h, cc) = lstm_step(tape, xm, state[l], w_x, wh_masked[l], bias)?;
            state[l] = (h, cc);
            hidden.push(h);
            x = h;
        }
        let omv = tape.leaf(out_mask.at_step(t).clone());
        let dropped = tape.mul(x, omv)?;
        let proj = tape.matmul_nt(dropped, out_proj)?;
        let logits = tape.add_row(proj, out_bias)?;
        outputs.push(StepOutput { logits, hidden });
    }

    let next_carry = Carry {
        state: state
            .iter()
            .map(|&(h, cc)| (tape.value(h), tape.value(cc)))
            .collect(),
    };
    Ok((outputs, next_carry))
}
