use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Input violates an operation's precondition.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("duplicate id `{0}`")]
    DuplicateId(String),

    #[error("unknown id `{0}`")]
    UnknownId(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("zero-norm vector")]
    ZeroNorm,

    #[error("template error: {0}")]
    Template(String),

    /// Malformed file or record.
    #[error("{path}:{line}: {reason}")]
    Format {
        path: String,
        line: usize,
        reason: String,
    },

    #[error("config error: {0}")]
    Config(String),

    /// Remote endpoint unreachable or returning errors after all retries.
    #[error("service error: {0}")]
    Service(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<String>, line: usize, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            line,
            reason: reason.into(),
        }
    }

    /// Process exit code: 2 validation, 3 external service, 4 data format.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Service(_) => 3,
            Error::Format { .. } | Error::Json(_) | Error::Io { .. } => 4,
            Error::DimensionMismatch { .. } | Error::ZeroNorm => 4,
            _ => 2,
        }
    }
}
