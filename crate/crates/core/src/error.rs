use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected} elements, got {actual}")]
    ShapeMismatch { expected: usize, actual: usize },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("tile size {0} is not a power of two >= 2")]
    InvalidTileSize(usize),

    #[error("layer '{0}' has no prunable weights")]
    EmptyLayer(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("unknown configuration key '{0}'")]
    UnknownKey(String),

    #[error("{path}: {message} at offset {offset}")]
    Format {
        path: PathBuf,
        offset: u64,
        message: String,
    },

    #[error("{0}")]
    Data(String),

    #[error("mismatched reports: {0}")]
    Mismatch(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for this error class: 1 usage, 2 data, 3 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::UnknownKey(_) | Error::InvalidArgument(_) => 1,
            Error::InvalidTileSize(_) => 1,
            Error::Numerical(_) => 3,
            _ => 2,
        }
    }
}
