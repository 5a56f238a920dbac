//! Error type shared across the crate.

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or layer shapes do not line up.
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Dimension {
        context: &'static str,
        expected: String,
        actual: String,
    },

    /// Invalid configuration value.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// A caller broke an API contract (stale cache, empty mask, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Input data contains NaN or infinity.
    #[error("non-finite input data in {0}")]
    NonFiniteData(&'static str),

    /// A gradient became NaN or infinite during training.
    #[error("non-finite gradient in parameter block `{block}` at step {step}")]
    NonFiniteGradient { block: &'static str, step: u64 },

    /// A metric is undefined for the given inputs (e.g. single-class AUC).
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    /// File parsing failed.
    #[error("parse error at {path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    /// File format version is not supported.
    #[error("unsupported format version in {path}: found {found}, expected {expected}")]
    Version {
        path: String,
        found: u32,
        expected: u32,
    },

    /// Requested flight id does not exist in the dataset.
    #[error("unknown flight id {id}; available ids: {available}")]
    UnknownFlight { id: u64, available: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn dimension(
        context: &'static str,
        expected: impl Into<String>,
        actual: impl Into<String>,
    ) -> Self {
        Error::Dimension {
            context,
            expected: expected.into(),
            actual: actual.into(),
        }
    }
}
