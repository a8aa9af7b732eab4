use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("training diverged at step {step}: {what} is not finite")]
    Divergence { step: u64, what: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Load(#[from] crate::dataset::LoadError),

    #[error("model file: {0}")]
    ModelFormat(String),

    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("geometry mismatch: {0}")]
    Geometry(String),

    #[error("index {index} out of range for codebook of size {size}")]
    IndexOutOfRange { index: usize, size: usize },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image encoding: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
