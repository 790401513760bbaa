//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes do not line up for the requested operation.
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    /// A configuration value violates an architectural invariant.
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    /// Numerically or structurally invalid input to an operation.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// The caller used an API outside its contract.
    #[error("usage error: {0}")]
    Usage(String),

    /// Training aborted because the loss left the finite range.
    #[error("non-finite loss at step {step}: {detail}")]
    NanLoss { step: u64, detail: String },

    /// Checkpoint file is malformed, truncated, or version-incompatible.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Malformed dataset, manifest, or image file.
    #[error("data error: {0}")]
    Data(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io { path: path.as_ref().display().to_string(), source }
    }
}
