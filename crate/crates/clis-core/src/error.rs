//! Crate-wide error type.

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ClisError {
    #[error("invalid config: {0}")]
    Config(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("instance could not be placed after {attempts} attempts")]
    Unplaceable { attempts: usize },

    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: usize, detail: String },

    #[error("pipeline stage `{stage}` failed: {detail}")]
    Stage { stage: String, detail: String },
}

pub type Result<T> = std::result::Result<T, ClisError>;

impl ClisError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        ClisError::Io {
            path: path.into(),
            source,
        }
    }
}
