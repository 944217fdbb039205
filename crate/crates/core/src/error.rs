use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid axis {axis} for a tensor of rank {rank}")]
    Axis { axis: usize, rank: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("checksum mismatch for {path}: expected {expected}, found {found}")]
    Checksum {
        path: PathBuf,
        expected: String,
        found: String,
    },

    #[error("annotation length {annotations} does not match signal length {samples}")]
    LengthMismatch { samples: usize, annotations: usize },

    #[error("{what} value {value} outside {range}")]
    Range {
        what: &'static str,
        value: i64,
        range: &'static str,
    },

    #[error("value {0} outside the μ-law domain [-1, 1]")]
    Domain(f64),

    #[error("degenerate covariance: {0}")]
    DegenerateCovariance(String),

    #[error("non-finite value produced by `{0}`")]
    NonFinite(&'static str),

    #[error("backward already ran on this tape")]
    BackwardTwice,

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("gradient reached frozen parameter `{0}`")]
    FrozenGradient(String),

    #[error("statistics: {0}")]
    Stats(String),

    #[error("data: {0}")]
    Data(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
