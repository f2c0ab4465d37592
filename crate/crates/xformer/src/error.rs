//! Error types shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum XError {
    /// Tensor extents do not line up for the requested operation.
    #[error("dimension mismatch: {0}")]
    Dim(String),
    /// A configuration value is structurally invalid.
    #[error("configuration error: {0}")]
    Config(String),
    /// The caller invoked an operation outside its contract.
    #[error("usage error: {0}")]
    Usage(String),
    /// A numeric failure (non-finite values, invalid temperature, ...).
    #[error("numeric error: {0}")]
    Numeric(String),
    /// Checkpoint encoding/decoding failure.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("i/o error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("image error at {path}: {message}")]
    Image { path: String, message: String },
}

pub type Result<T> = std::result::Result<T, XError>;

impl XError {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        XError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn image(path: impl Into<String>, message: impl Into<String>) -> Self {
        XError::Image {
            path: path.into(),
            message: message.into(),
        }
    }
}
