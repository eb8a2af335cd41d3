//! The experiment file format: TOML with `[model]`, `[data]`,
//! `[[regularizer]]`, `[optimizer]`, `[run]`, and optionally `[grid]`.
//! Unknown keys are hard errors; unspecified fields take the defaults
//! documented on each section struct.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::Mode;
use crate::error::{Error, Result};
use crate::model::{DropConfig, LmConfig};
use crate::optim::OptimConfig;
use crate::regularizers::RegularizerSpec;
use crate::trainer::{RunConfig, RunParams};

/// Environment variable supplying the default corpus directory.
pub const DATA_DIR_ENV: &str = "FDLAB_DATA_DIR";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    /// 0 means "use the corpus vocabulary size".
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub tie_embeddings: bool,
    pub drop: DropConfig,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            vocab_size: 0,
            embed_dim: 128,
            hidden_dim: 128,
            num_layers: 1,
            tie_embeddings: true,
            drop: DropConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Directory holding train.txt / valid.txt / test.txt. An empty path
    /// falls back to `$FDLAB_DATA_DIR`, then `data/desk`.
    pub dir: PathBuf,
    pub mode: Mode,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            dir: PathBuf::new(),
            mode: Mode::Word,
        }
    }
}

impl DataConfig {
    pub fn resolved_dir(&self) -> PathBuf {
        if !self.dir.as_os_str().is_empty() {
            return self.dir.clone();
        }
        match std::env::var_os(DATA_DIR_ENV) {
            Some(d) if !d.is_empty() => PathBuf::from(d),
            _ => PathBuf::from("data/desk"),
        }
    }
}

/// One hyper-parameter draw source: a finite set sampled uniformly or a
/// real interval sampled uniformly.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RangeSpec {
    Set { set: Vec<toml::Value> },
    Interval { min: f64, max: f64 },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSpec {
    pub draws: usize,
    pub seed: u64,
    /// Explicit comparison value for the summary; never inferred.
    pub baseline_ppl: f64,
    /// Dotted config paths (e.g. `optimizer.lr`, `regularizer.0.kappa`)
    /// mapped to their draw source.
    pub params: BTreeMap<String, RangeSpec>,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            draws: 1,
            seed: 0,
            baseline_ppl: f64::NAN,
            params: BTreeMap::new(),
        }
    }
}

impl GridSpec {
    /// Hyper-parameter assignment of draw `k`: finite sets are sampled
    /// with equal probability, intervals uniformly. Deterministic in
    /// `(seed, k)` and independent of map insertion order.
    pub fn assignment(&self, k: u64) -> BTreeMap<String, toml::Value> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(
            self.seed ^ k.wrapping_mul(0x9e37_79b9_7f4a_7c15),
        );
        let mut out = BTreeMap::new();
        for (path, range) in &self.params {
            let value = match range {
                RangeSpec::Set { set } => set[rng.gen_range(0..set.len())].clone(),
                RangeSpec::Interval { min, max } => {
                    toml::Value::Float(rng.gen_range(*min..=*max))
                }
            };
            out.insert(path.clone(), value);
        }
        out
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub model: ModelSection,
    pub data: DataConfig,
    pub regularizer: Vec<RegularizerSpec>,
    pub optimizer: OptimConfig,
    pub run: RunParams,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grid: Option<GridSpec>,
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    parse_config(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig =
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    Ok(cfg)
}

impl ExperimentConfig {
    /// Bind the config to a corpus vocabulary and produce the trainer's
    /// run configuration.
    pub fn resolve(&self, corpus_vocab: usize) -> Result<RunConfig> {
        let m = &self.model;
        let vocab_size = if m.vocab_size == 0 {
            corpus_vocab
        } else {
            if m.vocab_size != corpus_vocab {
                return Err(Error::Config(format!(
                    "configured vocab_size {} does not match corpus vocabulary {corpus_vocab}",
                    m.vocab_size
                )));
            }
            m.vocab_size
        };
        let cfg = RunConfig {
            model: LmConfig {
                vocab_size,
                embed_dim: m.embed_dim,
                hidden_dim: m.hidden_dim,
                num_layers: m.num_layers,
                tie_embeddings: m.tie_embeddings,
                drop: m.drop.clone(),
            },
            regularizers: self.regularizer.clone(),
            optimizer: self.optimizer,
            run: self.run.clone(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Fully resolved view (defaults applied), echoed into run output
    /// directories so every run is self-describing.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Apply one grid assignment (dotted path -> value) on top of this
    /// config, re-validating unknown keys and types through serde.
    pub fn with_overrides(&self, assignment: &BTreeMap<String, toml::Value>) -> Result<ExperimentConfig> {
        let text = self.to_toml()?;
        let mut doc: toml::Value =
            toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
        for (path, value) in assignment {
            set_path(&mut doc, path, value.clone())?;
        }
        let out: ExperimentConfig = doc
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        Ok(out)
    }
}

fn set_path(doc: &mut toml::Value, path: &str, value: toml::Value) -> Result<()> {
    let mut cur = doc;
    let parts: Vec<&str> = path.split('.').collect();
    for (k, part) in parts.iter().enumerate() {
        let last = k == parts.len() - 1;
        if let Ok(idx) = part.parse::<usize>() {
            let arr = cur
                .as_array_mut()
                .ok_or_else(|| Error::Config(format!("{path}: `{part}` indexes a non-array")))?;
            let slot = arr
                .get_mut(idx)
                .ok_or_else(|| Error::Config(format!("{path}: index {idx} out of range")))?;
            if last {
                *slot = value;
                return Ok(());
            }
            cur = slot;
        } else {
            let table = cur
                .as_table_mut()
                .ok_or_else(|| Error::Config(format!("{path}: `{part}` is not a table")))?;
            if last {
                // the key must already exist: overriding can't invent fields
                if !table.contains_key(*part) {
                    return Err(Error::Config(format!("{path}: unknown key `{part}`")));
                }
                table.insert(part.to_string(), value);
                return Ok(());
            }
            cur = table
                .get_mut(*part)
                .ok_or_else(|| Error::Config(format!("{path}: missing table `{part}`")))?;
        }
    }
    Ok(())
}
