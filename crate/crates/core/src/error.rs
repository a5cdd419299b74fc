use std::path::PathBuf;

use thiserror::Error;

/// Errors surfaced by the library. CLI exit codes map from [`Error::is_input_error`].
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    Input(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("degenerate segment {0}: projected start equals projected end")]
    DegenerateSegment(usize),

    #[error("zero-length vector has no direction")]
    ZeroVector,

    #[error("invalid trajectory: {0}")]
    Trajectory(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("undefined correlation: {0}")]
    UndefinedCorrelation(String),

    #[error("embedding provider failed for text {hash}: {reason}")]
    Provider { hash: String, reason: String },

    #[error("training diverged: {0}")]
    NonFinite(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Whether the failure is caused by bad user input (as opposed to a runtime failure).
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            Error::Input(_)
                | Error::Config(_)
                | Error::Trajectory(_)
                | Error::Parse { .. }
                | Error::Csv(_)
                | Error::Json(_)
                | Error::DegenerateSegment(_)
                | Error::ZeroVector
                | Error::Shape(_)
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
