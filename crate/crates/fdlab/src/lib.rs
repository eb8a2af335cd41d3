//! Desk-scale laboratory for siamese dropout regularization of LSTM
//! language models: a minimal f64 autodiff core, every dropout flavor the
//! training stack needs, the regularizer zoo (FD, ELD, ELDM, Pi-model, AR,
//! TAR, PR), exact enumeration oracles for the variance identity and the
//! ELD upper bound, an NT-ASGD trainer, and perplexity / Monte Carlo
//! evaluation.

pub mod config;
pub mod data;
pub mod error;
pub mod masks;
pub mod model;
pub mod oracle;
pub mod optim;
pub mod regularizers;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
