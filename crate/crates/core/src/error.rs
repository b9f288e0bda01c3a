//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimsidError {
    /// A primitive was invoked with incompatible tensor shapes.
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    /// Bad argument to an operation (counts, ranges, modes).
    #[error("{op}: invalid argument: {detail}")]
    InvalidArgument { op: &'static str, detail: String },

    /// A value that must be finite was NaN or infinite.
    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    /// Dataset construction or ingestion failed.
    #[error("data error: {0}")]
    Data(String),

    /// Checkpoint serialization problems (bad magic, version, truncation).
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Configuration file or key problems.
    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, SimsidError>;

impl SimsidError {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        SimsidError::ShapeMismatch { op, detail: detail.into() }
    }

    pub fn arg(op: &'static str, detail: impl Into<String>) -> Self {
        SimsidError::InvalidArgument { op, detail: detail.into() }
    }
}
