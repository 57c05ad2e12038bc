//! Error type shared by every module in the crate.

use thiserror::Error;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, MoecError>;

#[derive(Debug, Error)]
pub enum MoecError {
    /// Matrix/vector shapes do not agree.
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// Input file or stream does not match its declared format.
    #[error("format error: {0}")]
    Format(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// Parameter budget cannot accommodate any viable network.
    #[error("parameter budget of {budget} cannot fit a width-1 network (needs {needed})")]
    Budget { budget: usize, needed: usize },

    /// Training produced NaN/Inf or diverged past the abort threshold.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// Compressed artifact failed checksum, magic or version validation.
    #[error("corrupt artifact: {0}")]
    CorruptArtifact(String),

    /// Checkpoint cannot be resumed (version or config mismatch).
    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

impl MoecError {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        MoecError::Shape {
            op,
            detail: detail.into(),
        }
    }
}
