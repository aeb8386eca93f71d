//! Crate-wide error type.

use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A tensor, grid, or vector had dimensions incompatible with the operation.
    #[error("shape error: {0}")]
    Shape(String),

    /// An operation was asked to do something the configured variant or
    /// selection cannot provide.
    #[error("configuration error: {0}")]
    Config(String),

    /// Input data (manifest, image file, bounding box) is invalid.
    #[error("data error: {0}")]
    Data(String),

    /// A per-crop failure, annotated with the crop's position in its row.
    #[error("crop {index}: {source}")]
    Crop {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    /// Training produced a non-finite loss; diagnostics carried in the message.
    #[error("non-finite loss at step {step}: {details}")]
    NonFiniteLoss { step: u64, details: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn checkpoint(msg: impl Into<String>) -> Self {
        Error::Checkpoint(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Wrap an error with the index of the crop that produced it.
    pub fn at_crop(self, index: usize) -> Self {
        Error::Crop {
            index,
            source: Box::new(self),
        }
    }
}
