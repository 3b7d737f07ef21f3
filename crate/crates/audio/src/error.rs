use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, AudioError>;

#[derive(Debug, Error)]
pub enum AudioError {
    /// The file is not a WAV we can read; `defect` names what is wrong.
    #[error("wav format error in {path}: {defect}")]
    WavFormat { path: PathBuf, defect: String },

    /// A documented precondition of an operation was violated.
    #[error("contract violation in {op}: {detail}")]
    Contract { op: &'static str, detail: String },

    /// The dataset layout is not what the scanner expects.
    #[error("dataset ingestion error: {0}")]
    Ingestion(String),

    /// A feature cache file is malformed.
    #[error("feature cache error: {0}")]
    Cache(String),

    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl AudioError {
    pub fn contract(op: &'static str, detail: impl Into<String>) -> Self {
        AudioError::Contract { op, detail: detail.into() }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        AudioError::Io { path: path.into(), source }
    }
}
