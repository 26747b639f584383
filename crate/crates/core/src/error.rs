use std::path::PathBuf;

/// Errors raised by the core pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("malformed image: {0}")]
    MalformedImage(String),

    #[error("input mismatch: {0}")]
    Mismatch(String),

    #[error("degenerate model: {0}")]
    DegenerateModel(String),

    #[error("missing flow file for sequence {id}: {path}")]
    MissingFlow { id: String, path: PathBuf },

    #[error("missing predictions for {} test sequences: {}", .0.len(), .0.join(", "))]
    MissingPredictions(Vec<String>),

    #[error("non-finite loss in batch [{}]", .0.join(", "))]
    NonFiniteLoss(Vec<String>),

    #[error("bad flow file {path}: {reason}")]
    FlowFormat { path: PathBuf, reason: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    SafeTensors(#[from] safetensors::SafeTensorError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}
