//! Reproducible experiments over the multi-task curriculum transfer trainer:
//! data generation, training, evaluation, regime comparison, target-sparsity
//! sweeps and gradient checking.

pub mod config;
pub mod error;
pub mod run;

pub use config::ExperimentConfig;
pub use error::{CliError, Result};
