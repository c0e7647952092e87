use thiserror::Error;

/// Errors produced across the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("no solution: {0}")]
    NoSolution(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("infeasible problem: {0}")]
    Infeasible(String),
    #[error("problem too large: {0}")]
    TooLarge(String),
    #[error("iteration diverged: {0}")]
    Divergence(String),
    #[error("integration failure: {0}")]
    Integration(String),
    #[error("unknown {kind} `{name}`")]
    Unknown { kind: &'static str, name: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
