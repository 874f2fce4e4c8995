use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("layer {layer} produces a non-positive output size from input size {input}")]
    NonPositiveOutput { layer: usize, input: usize },

    #[error("invalid layer spec: {0}")]
    InvalidLayer(String),

    #[error("noise margin {margin} is below the footprint requirement {required}")]
    MarginTooSmall { margin: usize, required: usize },

    #[error("period mismatch: {0}")]
    PeriodMismatch(String),

    #[error("region {region:?} does not fit a {height}x{width} latent")]
    RegionOutOfBounds {
        region: (usize, usize, usize, usize),
        height: usize,
        width: usize,
    },

    #[error("network configuration mismatch: {0}")]
    ConfigMismatch(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("spectral normalization of an all-zero matrix")]
    DegenerateMatrix,

    #[error("probability {0} lies outside the open interval (0, 1)")]
    DomainError(f64),

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("crop {crop_h}x{crop_w} is larger than image {image_h}x{image_w}")]
    CropLargerThanImage {
        crop_h: usize,
        crop_w: usize,
        image_h: usize,
        image_w: usize,
    },

    #[error("empty patch set")]
    EmptySet,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("config {key}: {message}")]
    Config { key: String, message: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }
}
