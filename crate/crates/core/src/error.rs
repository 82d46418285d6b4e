use thiserror::Error;

/// Crate-wide error type.
#[derive(Error, Debug)]
pub enum Error {
    /// Tensor shapes disagree; names the offending axis where known.
    #[error("dimension error: {0}")]
    Dim(String),
    /// Invalid model or run configuration.
    #[error("configuration error: {0}")]
    Config(String),
    /// Invalid argument to an operation.
    #[error("argument error: {0}")]
    Arg(String),
    /// Bad input data (masks, images, dataset files).
    #[error("data error: {0}")]
    Data(String),
    /// Checkpoint file is malformed or fails its CRC.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    /// Training aborted on a non-finite loss term.
    #[error("non-finite loss: {0}")]
    NonFinite(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn dim_err(msg: impl Into<String>) -> Error {
    Error::Dim(msg.into())
}
