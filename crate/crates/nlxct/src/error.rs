//! Error types shared across the crate.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes are incompatible for the requested operation.
    #[error("dimension error: {0}")]
    Dim(String),

    /// An index (class label, patch index, ...) is out of its valid range.
    #[error("index error: {0}")]
    Index(String),

    /// An API contract was violated (non-scalar loss, reused tape, ...).
    #[error("contract error: {0}")]
    Contract(String),

    /// Invalid configuration value or file.
    #[error("configuration error: {0}")]
    Config(String),

    /// A training loss became NaN/Inf; the last good checkpoint is retained.
    #[error("training diverged at epoch {epoch}: {what}")]
    Diverged { epoch: usize, what: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(#[from] CheckpointError),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Typed failures when reading a checkpoint file.
#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic (expected NLCK)")]
    BadMagic,
    #[error("unsupported version {0}")]
    BadVersion(u32),
    #[error("truncated file while reading {0}")]
    Truncated(&'static str),
    #[error("unknown dtype code {0}")]
    BadDtype(u8),
    #[error("tensor name is not valid UTF-8")]
    BadName,
    #[error("missing entry {0}")]
    Missing(String),
    #[error("shape mismatch for {name}: checkpoint {found:?}, model {expected:?}")]
    ShapeMismatch {
        name: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },
}

impl Error {
    pub fn dim(msg: impl Into<String>) -> Self {
        Error::Dim(msg.into())
    }
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
    pub fn index(msg: impl Into<String>) -> Self {
        Error::Index(msg.into())
    }
}
