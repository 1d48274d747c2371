//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed input file content.
    #[error("parse error at {path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    /// Structural validation failure (out-of-range ids, shape mismatches
    /// in stored data, broken invariants).
    #[error("validation error: {0}")]
    Validation(String),

    /// Episode generation could not satisfy its constraints.
    #[error("task generation error: {0}")]
    TaskGen(String),

    /// Inconsistent or unusable configuration.
    #[error("config error: {0}")]
    Config(String),

    /// Tensor shape mismatch inside the model.
    #[error("shape error: {0}")]
    Shape(String),

    /// Wrong datapoint level for an operation.
    #[error("usage error: {0}")]
    Usage(String),

    /// Checkpoint or dump file could not be decoded.
    #[error("load error: {0}")]
    Load(String),

    /// Training aborted (e.g. non-finite loss).
    #[error("training error: {0}")]
    Train(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
