use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the simulator.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// No slot with this position is held by the cache.
    #[error("no cached slot at position {0}")]
    InvalidHandle(usize),

    #[error("slot at position {0} is a protected sink and cannot be evicted")]
    SinkProtected(usize),

    #[error("invalid trace at line {line}: {msg}")]
    InvalidTrace { line: usize, msg: String },

    #[error("invalid synthetic trace spec: {0}")]
    InvalidSpec(String),

    #[error("I/O error on {path} at byte offset {offset}")]
    Io {
        path: PathBuf,
        offset: u64,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn invalid_input(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn invalid_config(msg: impl Into<String>) -> Self {
        Error::InvalidConfig(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, offset: u64, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            offset,
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
