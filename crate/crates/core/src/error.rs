use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the verification pipeline.
#[derive(Debug, Error)]
pub enum SudaError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("utterance too short: need at least {needed} {unit}, got {got}")]
    UtteranceTooShort {
        needed: usize,
        got: usize,
        unit: &'static str,
    },

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("empty input for {0}")]
    EmptyInput(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("degenerate enrollment: zero-norm model embedding for {0}")]
    DegenerateEnrollment(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("malformed {format} file {path}: {detail}")]
    Format {
        format: &'static str,
        path: PathBuf,
        detail: String,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl SudaError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        SudaError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, SudaError>;
