//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by grid construction, ingestion, panel assembly,
/// estimation, and effect computation.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid boundary: {0}")]
    InvalidBoundary(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("timestamp {0} lies outside the study window")]
    OutOfWindow(String),

    #[error("invalid record: {0}")]
    InvalidRecord(String),

    #[error("unknown column `{0}`")]
    UnknownColumn(String),

    #[error("column `{0}` already exists")]
    DuplicateColumn(String),

    #[error("regressor `{0}` is collinear after demeaning")]
    SingularColumn(String),

    #[error("degenerate covariance: {0}")]
    DegenerateVcov(String),

    #[error("no interior minimum: {0}")]
    NoInteriorMinimum(String),

    #[error("inconsistent inputs: {0}")]
    Consistency(String),

    #[error("estimation sample is empty after missing-value and zero-group drops")]
    EmptySample,

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
