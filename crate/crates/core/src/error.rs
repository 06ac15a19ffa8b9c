use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = AmeError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum AmeError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("series `{id}` contains a non-finite value")]
    NonFinite { id: String },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("series too short: need at least {needed} values, got {got}")]
    SeriesTooShort { needed: usize, got: usize },

    #[error("degenerate spectrum: total power below threshold")]
    DegenerateSpectrum,

    #[error("period {period} too large for series of length {len}")]
    PeriodTooLarge { period: usize, len: usize },

    #[error("descriptor `{0}` has zero variance")]
    ZeroVariance(&'static str),

    #[error("quantile normalizer needs at least {needed} profiles, got {got}")]
    EmptyFit { needed: usize, got: usize },

    #[error("too few specialized experts: need at least 4, got {0}")]
    TooFewExperts(usize),

    #[error("sequence of {tokens} tokens exceeds the budget of {max}")]
    SequenceTooLong { tokens: usize, max: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("no valid positions to evaluate")]
    NoValidPositions,

    #[error("layer count mismatch: expected {expected}, got {got}")]
    LayerMismatch { expected: usize, got: usize },

    #[error("training diverged at step {step}: non-finite loss")]
    Divergence { step: usize },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("checkpoint version {found} not supported (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("frozen parameters cannot be updated")]
    Frozen,

    #[error("metric scale is zero")]
    ZeroScale,

    #[error("nonpositive ratio for metric `{0}`")]
    NonPositiveRatio(String),

    #[error("routing topology mismatch: {0}")]
    TopologyMismatch(String),

    #[error("clustering error: {0}")]
    Cluster(String),

    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },
}

impl AmeError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        AmeError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        AmeError::InvalidParameter(msg.into())
    }
}
