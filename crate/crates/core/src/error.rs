use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: malformed feature file: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("non-finite value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },

    #[error("zero-norm rows (cosine undefined): {rows:?}")]
    DegenerateRows { rows: Vec<usize> },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid data: {0}")]
    Data(String),

    #[error("need at least {needed} rows, got {got}")]
    InsufficientData { needed: usize, got: usize },

    #[error("validation gradients have zero covariance")]
    DegenerateValidation,

    #[error("index {index} out of range for {len} rows")]
    Index { index: usize, len: usize },

    #[error("candidate pool exhausted: {0}")]
    Exhaustion(String),

    #[error("training diverged: {0}")]
    Training(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("internal error: {0}")]
    Internal(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for this error class: config=2, data=3, exhaustion=4, internal=5.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Index { .. } => 2,
            // A missing input file is a configuration problem; other I/O failures are internal.
            Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => 2,
            Error::Format { .. }
            | Error::NonFinite { .. }
            | Error::DegenerateRows { .. }
            | Error::Data(_)
            | Error::InsufficientData { .. }
            | Error::DegenerateValidation
            | Error::Json { .. }
            | Error::Training(_) => 3,
            Error::Exhaustion(_) => 4,
            Error::Io { .. } | Error::Internal(_) => 5,
        }
    }
}
