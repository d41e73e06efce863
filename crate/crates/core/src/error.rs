use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DrnaError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("shape error: expected {expected}, got {got}")]
    Shape { expected: String, got: String },
    #[error("domain error: {0}")]
    Domain(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("non-finite {term} at step {step}")]
    NonFinite { term: &'static str, step: usize },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

impl DrnaError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DrnaError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn config(msg: impl Into<String>) -> Self {
        DrnaError::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        DrnaError::Data(msg.into())
    }
}

pub type Result<T, E = DrnaError> = std::result::Result<T, E>;
