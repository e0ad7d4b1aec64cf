use thiserror::Error;

/// Errors raised across the numeric core.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: String, got: String },

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("training diverged at epoch {epoch}: {reason}")]
    Divergence { epoch: usize, reason: String },

    #[error("matrix is singular or rank deficient: {0}")]
    Singular(String),

    #[error("invertible mixing network not found after {tries} attempts (seeds {first_seed}..{last_seed})")]
    NotInvertible {
        tries: usize,
        first_seed: u64,
        last_seed: u64,
    },

    #[error("unstable rollout: non-finite observation at t = {t}")]
    UnstableRollout { t: usize },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err(expected: impl ToString, got: impl ToString) -> Error {
    Error::Shape {
        expected: expected.to_string(),
        got: got.to_string(),
    }
}
