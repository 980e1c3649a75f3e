//! Crate-wide error type.

use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by coating, training, verification, and I/O operations.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument violated a documented precondition.
    #[error("domain error: {0}")]
    Domain(String),

    /// Tensor/image shapes disagree.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// Training produced a non-finite loss.
    #[error("training diverged at step {step}: {detail}")]
    Training { step: usize, detail: String },

    /// Dataset ingestion failed.
    #[error("ingestion error: {0}")]
    Ingestion(String),

    /// Checkpoint or report (de)serialization failed.
    #[error("format error: {0}")]
    Format(String),

    /// Underlying file I/O failure.
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Image decode/encode failure.
    #[error("image codec error: {0}")]
    Image(#[from] image::ImageError),

    /// JSON (de)serialization failure.
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
