use std::path::PathBuf;

use mitodet_nn::NnError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Nn(#[from] NnError),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("index out of range: {0}")]
    OutOfRange(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("missing frame file {path}")]
    MissingFrame { path: PathBuf },

    #[error("{path}: expected {expected} bytes, found {found}")]
    FrameSize {
        path: PathBuf,
        expected: u64,
        found: u64,
    },

    #[error("malformed manifest: {0}")]
    Manifest(String),

    #[error("malformed annotation: {0}")]
    Annotation(String),

    #[error("malformed detections: {0}")]
    Detections(String),

    #[error("singular transform matrix")]
    SingularMatrix,

    #[error("crop {crop_w}x{crop_h} larger than transformed image {image_w}x{image_h}")]
    CropTooLarge {
        crop_w: usize,
        crop_h: usize,
        image_w: usize,
        image_h: usize,
    },

    #[error("training diverged at batch {batch}: non-finite loss")]
    Diverged { batch: u64 },

    #[error("{0}")]
    Empty(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}
