//! Crate-wide error type.
//!
//! Variants are grouped by how callers are expected to react: `Dim` and
//! `Contract` indicate caller bugs, `Numeric` indicates a non-finite value or
//! an ill-posed numeric request, `Format`/`Io` cover on-disk artifacts, and
//! `Config`/`UndefinedMetric` cover degenerate experiment setups.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor extents do not line up for the requested operation.
    #[error("dimension mismatch: {0}")]
    Dim(String),

    /// An API contract was violated (e.g. backward on a non-scalar loss).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A forward pass produced NaN/Inf, or a value left its valid domain.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// A metric has no defined value on the given inputs.
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    /// Invalid experiment configuration (too few patients, bad cutoffs, ...).
    #[error("configuration error: {0}")]
    Config(String),

    /// Malformed or truncated on-disk artifact.
    #[error("format error: {0}")]
    Format(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn dim(msg: impl Into<String>) -> Self {
        Error::Dim(msg.into())
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
