use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = EltError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum EltError {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("{path}: line {line}: {message}")]
    Load {
        path: PathBuf,
        line: u64,
        message: String,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Coarse classification used for CLI exit codes and C error codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Numeric,
    Io,
}

impl EltError {
    pub fn kind(&self) -> ErrorKind {
        match self {
            EltError::Dimension(_) | EltError::Config(_) | EltError::Usage(_) => ErrorKind::Config,
            EltError::Numeric(_) => ErrorKind::Numeric,
            EltError::Data(_) | EltError::Load { .. } => ErrorKind::Data,
            EltError::Io { .. } => ErrorKind::Io,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        EltError::Io {
            path: path.into(),
            source,
        }
    }
}

pub(crate) fn dim_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(EltError::Dimension(msg.into()))
}
