//! Crate-wide error type with process exit-code mapping.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration, CLI arguments, or config-file contents.
    #[error("config error: {0}")]
    Config(String),
    /// Non-finite values or other numeric failures during training.
    #[error("numeric failure: {0}")]
    Numeric(String),
    /// Shape or dimension mismatch between components.
    #[error("dimension mismatch: {0}")]
    Dim(String),
    /// Environment protocol violations (e.g. stepping a finished episode).
    #[error("environment error: {0}")]
    Env(String),
    /// Malformed checkpoint or episode files.
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code: 0 success, 2 config error, 3 numeric failure, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Numeric(_) => 3,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
