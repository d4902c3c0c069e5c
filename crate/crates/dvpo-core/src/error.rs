//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum Error {
    /// A vector or matrix had the wrong length for the requested operation.
    #[error("shape mismatch in {what}: expected {expected}, got {got}")]
    ShapeMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    /// An input collection that must be nonempty was empty.
    #[error("empty input: {0}")]
    Empty(&'static str),

    /// A NaN or infinity showed up where finite values are required.
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    /// A configuration value is out of its valid range.
    #[error("invalid config {path}: {message}")]
    InvalidConfig { path: String, message: String },

    /// Training produced a non-finite or absurdly large loss.
    #[error("diverged at iteration {iteration}: loss {loss}")]
    Diverged { iteration: usize, loss: f64 },
}

impl Error {
    pub fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::InvalidConfig {
            path: path.into(),
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
