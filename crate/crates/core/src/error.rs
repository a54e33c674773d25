//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by dataset generation, training, metrics, and I/O.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument violated a documented precondition. Carries the offending
    /// field or parameter name so callers can point at the exact input.
    #[error("invalid parameter `{field}`: {reason}")]
    InvalidParameter { field: String, reason: String },

    /// Input tensor or sequence had the wrong shape or length.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// A metric is undefined on the given inputs (e.g. a class is absent).
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    /// Container or checkpoint file is malformed.
    #[error("format error: {0}")]
    Format(String),

    /// Container or checkpoint carries a version this build does not read.
    #[error("unsupported format version {found} (supported: {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("config error: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn invalid(field: &str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            field: field.to_string(),
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
