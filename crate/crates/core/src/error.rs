use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Bad user input: config files, CLI values, malformed requests.
    #[error("config error: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("scene rejected: {0}")]
    SceneRejected(String),

    #[error("inpaint backend '{stage}' failed: {msg}")]
    Backend { stage: String, msg: String },

    #[error("checkpoint format: {0}")]
    Checkpoint(String),

    #[error("path {0:?}: {1}")]
    Path(PathBuf, std::io::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Exit-code category: 1 for usage/config errors, 2 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Invalid(_) => 1,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
