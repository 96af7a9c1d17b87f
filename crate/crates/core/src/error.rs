use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed file: {0}")]
    Format(String),
    #[error("unsupported encoding: {0}")]
    Unsupported(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("input too short: {0}")]
    TooShort(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("numerical failure: {0}")]
    Numerics(String),
    #[error("parameter structure mismatch: {0}")]
    Structure(String),
    #[error("out-of-vocabulary id: {0}")]
    Vocab(String),
    #[error("segment has no voiced frames")]
    InvalidSegment,
    #[error("invalid embedding: {0}")]
    InvalidEmbedding(String),
    #[error("data error: {0}")]
    Data(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI: 1 usage/config, 2 data, 3 numerics.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Vocab(_) => 1,
            Error::Numerics(_) => 3,
            _ => 2,
        }
    }
}
