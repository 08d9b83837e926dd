//! Experiment plumbing: JSON configs, the baseline variants, per-run output,
//! the variant × agent-count × seed matrix, plots and the self-check suite.

pub mod check;
pub mod checkpoint;
pub mod config;
pub mod plot;
pub mod run;

use thiserror::Error;

use crate::trainer::TrainError;

pub use config::{parse_variants, ExperimentConfig, Variant};
pub use run::{run_matrix, run_one, MatrixSpec, RunRecord, SummaryRow};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl HarnessError {
    /// Process exit code: 2 for configuration problems, 3 for a training run
    /// that produced non-finite values, 1 otherwise.
    pub fn exit_code(&self) -> u8 {
        match self {
            HarnessError::Config(_) | HarnessError::Train(TrainError::Config(_)) => 2,
            HarnessError::Train(e) if e.is_divergence() => 3,
            _ => 1,
        }
    }
}
