//! Deep operator networks with mean-field variational posteriors trained
//! under Rényi α-divergence regularisation, plus the benchmark operator
//! problems used to exercise them.

pub mod datafile;
pub mod divergence;
pub mod evaluation;
pub mod model;
pub mod problems;
pub mod random_fields;
pub mod rng;
pub mod tensor;
pub mod training;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("numeric fault: {0}")]
    NumericFault(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("cholesky failed: {0}")]
    Cholesky(String),
    #[error("solver diverged: {0}")]
    Solver(String),
    #[error("malformed file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
