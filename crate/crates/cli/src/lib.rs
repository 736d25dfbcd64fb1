//! Experiment harness: dataset generation, training sweeps over (α, seed)
//! cells, evaluation and plot-ready exports.

pub mod commands;
pub mod config;
pub mod layout;
pub mod report;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("every training cell ended in a numeric fault")]
    AllFaulted,
}

impl HarnessError {
    /// Process exit status for this failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 2,
            HarnessError::Data(_) => 3,
            HarnessError::AllFaulted => 4,
        }
    }
}

/// Exit status for any error raised by a command.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    err.chain().find_map(|e| e.downcast_ref::<HarnessError>()).map_or(1, HarnessError::exit_code)
}
