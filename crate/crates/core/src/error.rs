use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the restoration engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid image: {0}")]
    InvalidImage(String),

    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),

    #[error("crop out of bounds: {0}")]
    OutOfBounds(String),

    #[error("wrong channel count: expected {expected}, got {actual}")]
    ChannelCount { expected: usize, actual: usize },

    #[error("near-singular gain: min |g| = {min_gain:e} below floor {floor:e}")]
    NearSingularGain { min_gain: f64, floor: f64 },

    #[error("fusion weights leave the simplex at pixel ({row}, {col}): sum = {sum}")]
    SimplexViolation { row: usize, col: usize, sum: f64 },

    #[error("unknown task id {0}")]
    UnknownTask(usize),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("dimension {0} is not a power of two")]
    NotPowerOfTwo(usize),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("stale or consumed forward cache")]
    StaleCache,

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("png error: {0}")]
    Png(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
