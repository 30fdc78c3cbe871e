use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: line {line}: field `{field}`: {message}")]
    MalformedRecord {
        path: PathBuf,
        line: usize,
        field: String,
        message: String,
    },

    #[error("{path}: line {line}: expected a `{expected}` record, found `{found}`")]
    KindMismatch {
        path: PathBuf,
        line: usize,
        expected: String,
        found: String,
    },

    #[error("invalid record: {0}")]
    InvalidRecord(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("sequence of length {len} exceeds context length {context_len}")]
    ContextOverflow { len: usize, context_len: usize },

    #[error("checkpoint {path}: integrity check `{check}` failed")]
    Integrity { path: PathBuf, check: &'static str },

    #[error("training failed: {0}")]
    Training(String),

    #[error("data generation failed: {0}")]
    DataGen(String),

    #[error("missing prerequisite artifact: {0}")]
    MissingArtifact(PathBuf),

    #[error("missing asset file: {0}")]
    MissingAsset(PathBuf),

    #[error("run directory is locked: {0}")]
    Locked(PathBuf),

    #[error("serialization error: {0}")]
    Serde(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
