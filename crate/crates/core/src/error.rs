use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors produced anywhere in the pipeline.
///
/// Variants are grouped by how a front end should react: [`Error::kind`]
/// collapses them into usage, data and runtime failures.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Load {
        path: PathBuf,
        line: u64,
        message: String,
    },

    #[error("usage: {0}")]
    Usage(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("store format: {0}")]
    Format(String),

    #[error("incompatible inputs: {0}")]
    Incompatible(String),

    #[error("class `{label}` has {available} training rows, fewer than k={k}")]
    Sampling {
        label: String,
        available: usize,
        k: usize,
    },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("index {index} out of range for {len} entries")]
    OutOfRange { index: usize, len: usize },

    #[error("training diverged at iteration {iteration}: {what}")]
    Divergence { iteration: usize, what: String },

    #[error("missing reference cell {model}/{dataset}/{regime}")]
    MissingReference {
        model: String,
        dataset: String,
        regime: String,
    },

    #[error("embedding provider: {0}")]
    Provider(String),

    #[error("benchmark: {0}")]
    Bench(String),

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

/// Coarse classification of an [`Error`], used to pick process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Data,
    Runtime,
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Usage(_) | Error::Config(_) => ErrorKind::Usage,
            Error::Divergence { .. } | Error::Bench(_) | Error::Provider(_) => ErrorKind::Runtime,
            _ => ErrorKind::Data,
        }
    }
}
