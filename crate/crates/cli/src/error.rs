use std::path::PathBuf;

use dsl_core::CoreError;
use thiserror::Error;

/// Process exit statuses.
pub const EXIT_OK: u8 = 0;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_DATA: u8 = 3;
pub const EXIT_NUMERIC: u8 = 4;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("{0}")]
    Usage(String),

    #[error(transparent)]
    Core(#[from] CoreError),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Data { path: PathBuf, message: String },
}

impl HarnessError {
    pub fn exit_code(&self) -> u8 {
        match self {
            HarnessError::Usage(_) | HarnessError::Core(CoreError::Config(_)) => EXIT_USAGE,
            HarnessError::Core(CoreError::NonFinite { .. }) => EXIT_NUMERIC,
            _ => EXIT_DATA,
        }
    }
}

pub type Result<T> = std::result::Result<T, HarnessError>;

pub fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> HarnessError {
    let path = path.into();
    move |source| HarnessError::Io { path, source }
}

pub fn usage(msg: impl Into<String>) -> HarnessError {
    HarnessError::Usage(msg.into())
}
