use std::path::PathBuf;

use thiserror::Error;

/// Errors surfaced by the simulation, training and evaluation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("index {index} out of range for size {size}")]
    OutOfRange { index: usize, size: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("unknown scenario template `{0}`")]
    UnknownTemplate(String),

    #[error("malformed sample: missing {0}")]
    MalformedSample(String),

    #[error("empty {0}")]
    Empty(&'static str),

    #[error("format error in {path}: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            detail: detail.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
