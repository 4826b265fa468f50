use thiserror::Error;

use crate::ode::Status;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("integration failed ({status:?}); last valid time {last_valid_t}")]
    Integration { status: Status, last_valid_t: f64 },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("stale forward cache: parameters changed since the forward pass")]
    StaleCache,

    #[error("data error: {0}")]
    Data(String),

    #[error("all records were dropped during preprocessing")]
    EmptySeries,

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
