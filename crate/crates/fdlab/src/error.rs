use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("target index {index} out of range for dimension {dim}")]
    IndexOutOfRange { index: usize, dim: usize },
    #[error("{op} expects a scalar, got shape {shape:?}")]
    NotScalar { op: &'static str, shape: Vec<usize> },
    #[error("invalid dropout rate {rate}: must lie in [0, 1)")]
    InvalidRate { rate: f64 },
    #[error("mask enumeration over {bits} bits exceeds the budget of {budget}")]
    BitBudget { bits: usize, budget: usize },
    #[error("missing dropout mask for layer {layer} site {site}")]
    MissingMask { layer: usize, site: &'static str },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("corpus error: {0}")]
    Corpus(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("training aborted: non-finite loss at batch {batch} (lr {lr}, seed {seed})")]
    NonFiniteLoss { batch: usize, lr: f64, seed: u64 },
    #[error("verification failed: {0}")]
    Verification(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
