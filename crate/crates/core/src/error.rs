use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the F-CAM pipeline.
#[derive(Debug, Error)]
pub enum FcamError {
    #[error("non-finite value at index {index}")]
    NonFinite { index: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },

    #[error("raster parse error at byte {offset}: {message}")]
    RasterParse { offset: usize, message: String },

    #[error("unsupported CAM method: {0}")]
    UnsupportedMethod(String),

    #[error("gradients unavailable: bundle is inference-only")]
    GradientUnavailable,

    #[error("frozen classifier was modified during decoder fine-tuning")]
    FreezeViolation,

    #[error("record {id}: {message}")]
    Record { id: String, message: String },

    #[error("dataset not found: {0}")]
    DatasetNotFound(PathBuf),

    #[error("checkpoint not found: {0}")]
    CheckpointNotFound(PathBuf),

    #[error("config error: {0}")]
    Config(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("image decode error: {0}")]
    Image(String),
}

pub type Result<T> = std::result::Result<T, FcamError>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> FcamError {
    let path = path.into();
    move |source| FcamError::Io { path, source }
}
