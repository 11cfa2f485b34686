use thiserror::Error;

use crate::geometry::BBox;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid frame {width}x{height}: both sides must be positive")]
    InvalidFrame { width: f64, height: f64 },

    #[error("region {0:?} has zero area after clamping to the image")]
    DegenerateRegion(BBox),

    #[error("patch size {patch} does not fit a {height}x{width} input")]
    PatchTooLarge { patch: usize, height: usize, width: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("global-to-local attention needs at least one global token")]
    EmptyContext,

    #[error("image side {side} is not divisible by {divisor}")]
    Divisibility { side: usize, divisor: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("no scene matched the profile after {0} attempts")]
    InfeasibleScene(usize),

    #[error("run-length encoding: {0}")]
    Rle(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("image codec: {0}")]
    Codec(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl From<image::ImageError> for Error {
    fn from(e: image::ImageError) -> Self {
        Error::Codec(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
