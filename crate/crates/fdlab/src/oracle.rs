//! Exact, exhaustive-enumeration verification of the analytical claims on
//! tiny networks, independent of the training path.
//!
//! Two claims are checked numerically: the pairwise squared-distance
//! expectation equals twice the summed per-unit prediction variance
//! (the variance identity), and it is upper bounded by four times the
//! expected squared distance to the expected-mask prediction (the ELD
//! bound). A second, independently coded enumerator built on a scalar
//! LSTM evaluator guards against one implementation validating itself.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::masks::{
    enumerate_all, DropScheme, Granularity, MaskSet, Site, SiteKey, SiteMask, ENUM_BIT_BUDGET,
};
use crate::model::{forward, Carry, DropConfig, LmConfig, LmModel};
use crate::tensor::{sigmoid, Tape, Tensor};

/// A tiny network plus the fixed input it is evaluated on.
pub struct TinyNet {
    pub model: LmModel,
    /// One token id per step (batch size 1).
    pub tokens: Vec<usize>,
    pub seed: u64,
}

impl TinyNet {
    fn sites(&self) -> Vec<(SiteKey, DropScheme, Vec<usize>)> {
        self.model.mask_sites(1)
    }

    /// Independent Bernoulli bits across all stochastic sites; per-step
    /// sites draw fresh bits every step.
    pub fn mask_bits(&self) -> usize {
        self.sites()
            .iter()
            .map(|(_, scheme, shape)| {
                let reps = if scheme.granularity == Granularity::PerStep {
                    self.tokens.len()
                } else {
                    1
                };
                scheme.bits(shape) * reps
            })
            .sum()
    }

    fn step_tokens(&self) -> Vec<Vec<usize>> {
        self.tokens.iter().map(|&t| vec![t]).collect()
    }
}

/// All joint mask assignments with exact probabilities and the final-step
/// prediction each one produces.
pub struct EnumeratedPredictions {
    /// (pre-softmax prediction at the last step, joint probability)
    pub outcomes: Vec<(Vec<f64>, f64)>,
}

/// Exact expectations over the enumerated mask distribution.
#[derive(Debug, Clone, Serialize)]
pub struct ExactExpectations {
    /// E over ordered i.i.d. mask pairs of the squared logit distance.
    pub e_pair_sq_dist: f64,
    /// Exact variance of each output unit.
    pub per_unit_variances: Vec<f64>,
    /// Expected prediction vector.
    pub e_prediction: Vec<f64>,
    /// E over masks of the squared distance to the expected-mask output.
    pub expected_eld_penalty: f64,
}

/// Evaluate the final-step prediction for one mask assignment via the
/// production forward pass.
fn predict_tape(net: &TinyNet, masks: &MaskSet) -> Result<Vec<f64>> {
    let mut tape = Tape::new(0);
    let bound = net.model.bind(&mut tape);
    let carry = Carry::zero(&net.model.config, 1);
    let (outs, _) = forward(
        &mut tape,
        &net.model,
        &bound,
        &net.step_tokens(),
        masks,
        &carry,
    )?;
    Ok(tape.data(outs.last().unwrap().logits).to_vec())
}

/// One independent draw of a mask for one site (a mixed-radix "digit").
struct Draw {
    key: SiteKey,
    step: Option<usize>,
    options: Vec<(Tensor, f64)>,
}

fn draws_for(net: &TinyNet) -> Result<Vec<Draw>> {
    let mut draws = Vec::new();
    for (key, scheme, shape) in net.sites() {
        if scheme.granularity == Granularity::PerStep {
            for t in 0..net.tokens.len() {
                draws.push(Draw {
                    key,
                    step: Some(t),
                    options: enumerate_all(&scheme, &shape)?,
                });
            }
        } else {
            draws.push(Draw {
                key,
                step: None,
                options: enumerate_all(&scheme, &shape)?,
            });
        }
    }
    Ok(draws)
}

fn maskset_from_digits(net: &TinyNet, draws: &[Draw], digits: &[usize]) -> MaskSet {
    let steps = net.tokens.len();
    let mut per_site: std::collections::BTreeMap<SiteKey, SiteMask> = Default::default();
    for (draw, &digit) in draws.iter().zip(digits) {
        let mask = draw.options[digit].0.clone();
        match draw.step {
            None => {
                per_site.insert(draw.key, SiteMask::Shared(mask));
            }
            Some(t) => {
                let entry = per_site.entry(draw.key).or_insert_with(|| {
                    SiteMask::PerStep(vec![Tensor::zeros(mask.shape().to_vec()); steps])
                });
                if let SiteMask::PerStep(v) = entry {
                    v[t] = mask;
                }
            }
        }
    }
    MaskSet::from_masks(per_site.into_iter().collect(), 0)
}

fn enumerate_with(
    net: &TinyNet,
    eval: impl Fn(&TinyNet, &MaskSet) -> Result<Vec<f64>>,
) -> Result<EnumeratedPredictions> {
    let bits = net.mask_bits();
    if bits > ENUM_BIT_BUDGET {
        return Err(Error::BitBudget {
            bits,
            budget: ENUM_BIT_BUDGET,
        });
    }
    let draws = draws_for(net)?;
    let radices: Vec<usize> = draws.iter().map(|d| d.options.len()).collect();
    let total: usize = radices.iter().product();
    let mut digits = vec![0usize; draws.len()];
    let mut outcomes = Vec::with_capacity(total);
    for _ in 0..total {
        let masks = maskset_from_digits(net, &draws, &digits);
        let prob: f64 = draws
            .iter()
            .zip(&digits)
            .map(|(d, &i)| d.options[i].1)
            .product();
        outcomes.push((eval(net, &masks)?, prob));
        // increment mixed-radix counter
        for pos in 0..digits.len() {
            digits[pos] += 1;
            if digits[pos] < radices[pos] {
                break;
            }
            digits[pos] = 0;
        }
    }
    Ok(EnumeratedPredictions { outcomes })
}

/// Primary enumerator: production forward pass per mask assignment.
pub fn enumerate_predictions(net: &TinyNet) -> Result<EnumeratedPredictions> {
    enumerate_with(net, predict_tape)
}

/// Second enumerator: scalar re-implementation of the forward pass.
pub fn enumerate_predictions_scalar(net: &TinyNet) -> Result<EnumeratedPredictions> {
    enumerate_with(net, |n, m| {
        Ok(scalar_forward(&n.model, &n.tokens, m)?.pop().unwrap())
    })
}

/// Value-only scalar LSTM evaluator, written independently of the tape;
/// returns the logits of every step. Doubles as the recomputation oracle
/// for perplexity.
pub(crate) fn scalar_forward(
    model: &LmModel,
    tokens: &[usize],
    masks: &MaskSet,
) -> Result<Vec<Vec<f64>>> {
    let cfg = &model.config;
    let (e, d, m) = (cfg.embed_dim, cfg.hidden_dim, cfg.vocab_size);
    let emb = model.param("embedding");
    let emb_mask = masks.require(0, Site::Embedding)?;
    let out_mask = masks.require(cfg.num_layers - 1, Site::Output)?;
    let mut h_state = vec![vec![0.0; d]; cfg.num_layers];
    let mut c_state = vec![vec![0.0; d]; cfg.num_layers];
    let mut all_logits = Vec::with_capacity(tokens.len());
    for (t, &tok) in tokens.iter().enumerate() {
        // embedding row with row dropout
        let mut x: Vec<f64> = (0..e)
            .map(|j| emb.value.data()[tok * e + j] * emb_mask.at_step(t).data()[tok * e + j])
            .collect();
        for l in 0..cfg.num_layers {
            let in_mask = masks.require(l, Site::Input)?;
            let xm: Vec<f64> = x
                .iter()
                .zip(in_mask.at_step(t).data())
                .map(|(a, b)| a * b)
                .collect();
            let wx = &model.param(&format!("w_x_{l}")).value;
            let wh = &model.param(&format!("w_h_{l}")).value;
            let bias = &model.param(&format!("bias_{l}")).value;
            let wh_mask = masks.require(l, Site::WeightHh)?;
            let in_dim = xm.len();
            let mut new_h = vec![0.0; d];
            let mut new_c = vec![0.0; d];
            for u in 0..d {
                let gate = |off: usize| -> f64 {
                    let col = off * d + u;
                    let mut acc = bias.data()[col];
                    for k in 0..in_dim {
                        acc += xm[k] * wx.data()[k * 4 * d + col];
                    }
                    for k in 0..d {
                        let w = wh.data()[k * 4 * d + col] * wh_mask.at_step(t).data()[k * 4 * d + col];
                        acc += h_state[l][k] * w;
                    }
                    acc
                };
                let i = sigmoid(gate(0));
                let f = sigmoid(gate(1));
                let g = gate(2).tanh();
                let o = sigmoid(gate(3));
                new_c[u] = f * c_state[l][u] + i * g;
                new_h[u] = o * new_c[u].tanh();
            }
            h_state[l] = new_h.clone();
            c_state[l] = new_c;
            x = new_h;
        }
        let dropped: Vec<f64> = x
            .iter()
            .zip(out_mask.at_step(t).data())
            .map(|(a, b)| a * b)
            .collect();
        let out_bias = &model.param("out_bias").value;
        let proj = if cfg.tie_embeddings {
            &emb.value
        } else {
            &model.param("w_out").value
        };
        let mut logits = vec![0.0; m];
        for (q, logit) in logits.iter_mut().enumerate() {
            let mut acc = out_bias.data()[q];
            for j in 0..d {
                acc += dropped[j] * proj.data()[q * d + j];
            }
            *logit = acc;
        }
        all_logits.push(logits);
    }
    Ok(all_logits)
}

impl EnumeratedPredictions {
    /// Direct ordered-pair double loop; deliberately does not use the
    /// variance shortcut being verified.
    pub fn e_pair_sq_dist(&self) -> f64 {
        let mut total = 0.0;
        for (pa, qa) in &self.outcomes {
            for (pb, qb) in &self.outcomes {
                let d2: f64 = pa.iter().zip(pb).map(|(x, y)| (x - y) * (x - y)).sum();
                total += qa * qb * d2;
            }
        }
        total
    }

    pub fn e_prediction(&self) -> Vec<f64> {
        let m = self.outcomes[0].0.len();
        let mut mean = vec![0.0; m];
        for (p, q) in &self.outcomes {
            for (mu, x) in mean.iter_mut().zip(p) {
                *mu += q * x;
            }
        }
        mean
    }

    pub fn per_unit_variances(&self) -> Vec<f64> {
        let mean = self.e_prediction();
        let m = mean.len();
        let mut var = vec![0.0; m];
        for (p, q) in &self.outcomes {
            for j in 0..m {
                let d = p[j] - mean[j];
                var[j] += q * d * d;
            }
        }
        var
    }

    pub fn expected_eld_penalty(&self, p_bar: &[f64]) -> f64 {
        self.outcomes
            .iter()
            .map(|(p, q)| {
                q * p
                    .iter()
                    .zip(p_bar)
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>()
            })
            .sum()
    }
}

/// Exhaustively enumerate all joint mask assignments of `net` and return
/// the exact quantities both claims are stated in.
pub fn exact_expectations(net: &TinyNet) -> Result<ExactExpectations> {
    let preds = enumerate_predictions(net)?;
    let p_bar = predict_tape(net, &MaskSet::expected(&net.sites()))?;
    Ok(ExactExpectations {
        e_pair_sq_dist: preds.e_pair_sq_dist(),
        per_unit_variances: preds.per_unit_variances(),
        e_prediction: preds.e_prediction(),
        expected_eld_penalty: preds.expected_eld_penalty(&p_bar),
    })
}

/// Pass/fail summary of one numerically verified claim.
#[derive(Debug, Clone, Serialize)]
pub struct ClaimReport {
    pub claim: String,
    pub trials: usize,
    pub violations: usize,
    pub worst_abs_deviation: f64,
    pub worst_seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_ratio: Option<f64>,
    pub passed: bool,
}

impl ClaimReport {
    fn new(claim: &str) -> Self {
        ClaimReport {
            claim: claim.to_string(),
            trials: 0,
            violations: 0,
            worst_abs_deviation: 0.0,
            worst_seed: None,
            max_ratio: None,
            passed: true,
        }
    }

    fn record(&mut self, seed: u64, deviation: f64, violated: bool) {
        self.trials += 1;
        if deviation > self.worst_abs_deviation {
            self.worst_abs_deviation = deviation;
            self.worst_seed = Some(seed);
        }
        if violated {
            self.violations += 1;
            self.passed = false;
        }
    }
}

/// Variance identity: |E‖p(s_i)−p(s_j)‖² − 2·ΣVar| ≤ 1e-9 relative.
pub fn check_variance_identity(nets: &[TinyNet]) -> Result<ClaimReport> {
    let mut report = ClaimReport::new("variance_identity");
    for net in nets {
        let ex = exact_expectations(net)?;
        let two_var: f64 = 2.0 * ex.per_unit_variances.iter().sum::<f64>();
        let dev = (ex.e_pair_sq_dist - two_var).abs();
        let tol = 1e-9 * ex.e_pair_sq_dist.abs().max(1.0);
        report.record(net.seed, dev, dev > tol);
    }
    Ok(report)
}

/// ELD bound: E‖p(s_i)−p(s_j)‖² ≤ 4·R̃_ELD + 1e-12; reports max ratio.
pub fn check_eld_bound(nets: &[TinyNet]) -> Result<ClaimReport> {
    let mut report = ClaimReport::new("eld_upper_bound");
    let mut max_ratio = 0.0f64;
    for net in nets {
        let ex = exact_expectations(net)?;
        let bound = 4.0 * ex.expected_eld_penalty;
        let excess = ex.e_pair_sq_dist - bound;
        if bound > 0.0 {
            max_ratio = max_ratio.max(ex.e_pair_sq_dist / bound);
        }
        report.record(net.seed, excess.max(0.0), excess > 1e-12);
    }
    report.max_ratio = Some(max_ratio * 4.0); // ratio of LHS to R̃_ELD itself
    Ok(report)
}

/// Agreement between the two independently coded enumerators, 1e-12
/// relative on every exact quantity.
pub fn check_enumerator_agreement(nets: &[TinyNet]) -> Result<ClaimReport> {
    let mut report = ClaimReport::new("independent_enumerator_agreement");
    for net in nets {
        let a = enumerate_predictions(net)?;
        let b = enumerate_predictions_scalar(net)?;
        let (ea, eb) = (a.e_pair_sq_dist(), b.e_pair_sq_dist());
        let dev = (ea - eb).abs();
        let tol = 1e-12 * ea.abs().max(1.0);
        let mut violated = dev > tol;
        for (ma, mb) in a.e_prediction().iter().zip(b.e_prediction()) {
            if (ma - mb).abs() > 1e-12 * ma.abs().max(1.0) {
                violated = true;
            }
        }
        report.record(net.seed, dev, violated);
    }
    Ok(report)
}

/// Monte Carlo estimate of the pairwise expectation: mean of `n` single
/// mask-pair squared distances must fall within five standard errors of
/// the exact value.
pub fn mc_estimator_consistency(net: &TinyNet, n: usize, seed: u64) -> Result<ClaimReport> {
    if n < 1 {
        return Err(Error::Config("mc_estimator_consistency needs n >= 1".into()));
    }
    let exact = exact_expectations(net)?.e_pair_sq_dist;
    let sites = net.sites();
    let steps = net.tokens.len();
    let mut sum = 0.0;
    let mut sumsq = 0.0;
    for k in 0..n {
        let base = seed.wrapping_add(2 * k as u64);
        let mi = MaskSet::sample(&sites, steps, base)?;
        let mj = MaskSet::sample(&sites, steps, base.wrapping_add(1))?;
        let pi = scalar_forward(&net.model, &net.tokens, &mi)?.pop().unwrap();
        let pj = scalar_forward(&net.model, &net.tokens, &mj)?.pop().unwrap();
        let r: f64 = pi.iter().zip(&pj).map(|(x, y)| (x - y) * (x - y)).sum();
        sum += r;
        sumsq += r * r;
    }
    let mean = sum / n as f64;
    let var = (sumsq / n as f64 - mean * mean).max(0.0);
    let stderr = (var / n as f64).sqrt();
    let dev = (mean - exact).abs();
    // With a degenerate (deterministic) net the stderr is 0 and the mean
    // must match exactly.
    let violated = if stderr == 0.0 {
        dev > 1e-12
    } else {
        dev > 5.0 * stderr
    };
    let mut report = ClaimReport::new("mc_estimator_consistency");
    report.record(seed, dev, violated);
    Ok(report)
}

/// Deterministic population of enumerable tiny networks.
///
/// Dimensions stay at or below 2 hidden units and 3 vocabulary entries;
/// sites rotate through every granularity while keeping the joint bit
/// count well inside the budget.
pub fn random_tiny_net(seed: u64, rate: f64) -> TinyNet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let variant = rng.gen_range(0u8..4);
    let off = |granularity| DropScheme {
        rate: 0.0,
        granularity,
    };
    let mut drop = DropConfig {
        input: off(Granularity::PerStep),
        inter_layer: off(Granularity::PerStep),
        output: off(Granularity::PerStep),
        embedding: off(Granularity::EmbeddingRow),
        weight: off(Granularity::WeightMatrix),
    };
    let (dim, steps) = match variant {
        0 => {
            // per-step input + output masks, T=1: 2d bits
            drop.input.rate = rate;
            drop.output.rate = rate;
            (2, 1)
        }
        1 => {
            // per-step input over 2 steps + per-sequence output: 2d+d bits
            drop.input.rate = rate;
            drop.output = DropScheme {
                rate,
                granularity: Granularity::PerSequence,
            };
            (2, 2)
        }
        2 => {
            // embedding rows + per-step output, T=1: vocab + d bits
            drop.embedding.rate = rate;
            drop.output.rate = rate;
            (2, 1)
        }
        _ => {
            // weight drop (d x 4d = 4 bits at d=1) + input, T=1
            drop.weight.rate = rate;
            drop.input.rate = rate;
            (1, 1)
        }
    };
    let vocab = rng.gen_range(2usize..=3);
    let config = LmConfig {
        vocab_size: vocab,
        embed_dim: dim,
        hidden_dim: dim,
        num_layers: 1,
        tie_embeddings: true,
        drop,
    };
    let model = LmModel::init(config, rng.gen()).unwrap();
    let tokens = (0..steps).map(|_| rng.gen_range(0..vocab)).collect();
    TinyNet {
        model,
        tokens,
        seed,
    }
}

/// Full machine-readable verification run, as emitted by the CLI.
#[derive(Debug, Clone, Serialize)]
pub struct VerificationReport {
    pub trials: usize,
    pub bit_budget: usize,
    pub variance_identity: ClaimReport,
    pub eld_bound: ClaimReport,
    pub enumerator_agreement: ClaimReport,
    pub mc_consistency: ClaimReport,
    pub passed: bool,
}

pub fn run_verification(
    bits: usize,
    trials: usize,
    mc_samples: usize,
    seed: u64,
) -> Result<VerificationReport> {
    if bits > ENUM_BIT_BUDGET {
        return Err(Error::BitBudget {
            bits,
            budget: ENUM_BIT_BUDGET,
        });
    }
    let rates = [0.1, 0.5];
    let mut nets = Vec::with_capacity(trials);
    for k in 0..trials {
        let rate = rates[k % rates.len()];
        let net = random_tiny_net(seed.wrapping_add(k as u64), rate);
        debug_assert!(net.mask_bits() <= bits.min(ENUM_BIT_BUDGET));
        nets.push(net);
    }
    let variance_identity = check_variance_identity(&nets)?;
    let eld_bound = check_eld_bound(&nets)?;
    let agreement = check_enumerator_agreement(&nets)?;
    let mc = mc_estimator_consistency(&random_tiny_net(seed, 0.5), mc_samples, seed)?;
    let passed = variance_identity.passed && eld_bound.passed && agreement.passed && mc.passed;
    Ok(VerificationReport {
        trials,
        bit_budget: bits,
        variance_identity,
        eld_bound,
        enumerator_agreement: agreement,
        mc_consistency: mc,
        passed,
    })
}
