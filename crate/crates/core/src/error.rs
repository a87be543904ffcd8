//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shape or axis mismatch between tensors.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// Input outside an operation's mathematical domain (log of a
    /// non-positive value, division by zero, zero-norm cosine, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// An API contract was violated (non-scalar backward, reused graph,
    /// wrong token count, missing gradient, ...).
    #[error("contract error: {0}")]
    Contract(String),

    /// Invalid configuration value or combination.
    #[error("config error: {0}")]
    Config(String),

    /// A dataset record could not be ingested.
    #[error("ingestion error at {record}: {message}")]
    Ingestion { record: String, message: String },

    /// Episode sampling could not satisfy the requested shape.
    #[error("sampling error: {0}")]
    Sampling(String),

    /// Checkpoint file rejected (bad magic, version, or truncation).
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by user-supplied configuration rather than
    /// runtime failures. The CLI maps these to exit code 1.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_))
    }
}
