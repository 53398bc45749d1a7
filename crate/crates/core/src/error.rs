use std::path::PathBuf;

use crate::tensor::Shape;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {left} and {right}")]
    ShapeMismatch { op: &'static str, left: Shape, right: Shape },

    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("expected a single-element output, got shape {0}")]
    NotScalar(Shape),

    #[error("target value {value} is not a valid class (expected 0 or 1)")]
    InvalidTarget { value: u8 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("image size {size} must be a multiple of {multiple}")]
    Indivisible { size: usize, multiple: usize },

    #[error("image {image_h}x{image_w} is smaller than patch {patch}; pad the inputs to at least the patch size")]
    ImageSmallerThanPatch { image_h: usize, image_w: usize, patch: usize },

    #[error("unknown parameter `{0}`")]
    UnknownParam(String),

    #[error("duplicate parameter `{0}`")]
    DuplicateParam(String),

    #[error("non-finite loss {loss} at epoch {epoch}, step {step}")]
    Diverged { epoch: usize, step: usize, loss: f64 },

    #[error("all confusion counts are zero")]
    EmptyConfusion,

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },

    #[error("{path}: {source}")]
    Image { path: PathBuf, source: image::ImageError },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn image(path: impl Into<PathBuf>, source: image::ImageError) -> Self {
        Error::Image { path: path.into(), source }
    }
}
