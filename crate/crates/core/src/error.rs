//! Error taxonomy. Variants map onto the CLI exit codes: config errors exit 2,
//! data errors 3, numeric failures 4.

use thiserror::Error;

/// Unified error for corpus generation, training, inference and evaluation.
#[derive(Debug, Error)]
pub enum CoreError {
    /// Invalid or inconsistent configuration (bad shapes, unknown keys, out-of-range values).
    #[error("config error: {0}")]
    Config(String),

    /// Broken or mismatched input data (missing files, malformed archives, shape mismatches).
    #[error("data error: {0}")]
    Data(String),

    /// Numeric failure (NaN or divergence detected mid-run).
    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl CoreError {
    /// Process exit code for the CLI surface.
    pub fn exit_code(&self) -> i32 {
        match self {
            CoreError::Config(_) => 2,
            CoreError::Data(_) | CoreError::Io(_) | CoreError::Json(_) => 3,
            CoreError::Numeric(_) => 4,
        }
    }
}
