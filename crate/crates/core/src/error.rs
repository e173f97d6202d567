use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("duplicate rating for (user {user}, item {item})")]
    DuplicatePair { user: String, item: String },

    #[error("epsilon must be positive, got {0}")]
    NonPositiveEpsilon(f64),

    #[error("delta must lie strictly between 0 and 1, got {0}")]
    DeltaOutOfRange(f64),

    #[error("epsilon {epsilon} exceeds 2 ln(1/delta) = {bound} (delta = {delta})")]
    EpsilonTooLarge {
        epsilon: f64,
        delta: f64,
        bound: f64,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("out of range: {0}")]
    OutOfRange(String),

    #[error("no observed entries")]
    EmptyObservations,

    #[error("test set is empty")]
    EmptyTestSet,

    #[error("broadcast eigenvalue must be positive, got {0}")]
    ZeroLambda(f64),

    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("config: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn file(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::File {
            path: path.into(),
            source,
        }
    }
}
