//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Argument outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// Mismatch between a vector/tensor and the model layout.
    #[error("layout mismatch: {0}")]
    Layout(String),

    /// An iterative solver failed to reach its tolerance.
    #[error("no convergence in {context}: residual {residual:.3e} after {iterations} iterations")]
    NoConvergence {
        context: String,
        residual: f64,
        iterations: usize,
    },

    /// Non-finite value where a finite one is required.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// Invalid run or solver configuration.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// Malformed on-disk data (IDX files, checkpoints).
    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub fn layout(msg: impl Into<String>) -> Self {
        Error::Layout(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn parse(msg: impl Into<String>) -> Self {
        Error::Parse(msg.into())
    }
}
