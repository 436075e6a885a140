//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes do not satisfy an operation's precondition.
    #[error("shape error: {0}")]
    Shape(String),

    /// An API contract was violated (bad argument, degenerate batch, ...).
    #[error("contract error: {0}")]
    Contract(String),

    /// A value left the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// A serialized artifact (dataset container, checkpoint, config) is
    /// malformed.
    #[error("format error: {0}")]
    Format(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
}
