use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("schema error: {0}")]
    Schema(String),

    #[error("row {row}: {message}")]
    Row { row: usize, message: String },

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("coverage error: {message} ({} keys, first: {})", .keys.len(), .keys.first().map(String::as_str).unwrap_or("-"))]
    Coverage { message: String, keys: Vec<String> },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("transport error: {0}")]
    Transport(String),

    #[error("run interrupted by transport failure, checkpoint written to {checkpoint}: {source}")]
    Interrupted {
        checkpoint: PathBuf,
        #[source]
        source: Box<Error>,
    },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

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

    /// True for failures caused by an unreachable or misbehaving remote service.
    pub fn is_transport(&self) -> bool {
        matches!(self, Error::Transport(_) | Error::Interrupted { .. })
    }
}
