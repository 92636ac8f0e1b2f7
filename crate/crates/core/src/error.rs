use std::path::PathBuf;

use thiserror::Error;

use crate::modality::Modality;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error at {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("no samples found in {0}")]
    NoSamples(PathBuf),

    #[error("sample {sample}: missing {modality} image at {path}")]
    MissingModality {
        sample: String,
        modality: Modality,
        path: PathBuf,
    },

    #[error("malformed caption sidecar {path}: {message}")]
    MalformedSidecar { path: PathBuf, message: String },

    #[error("dataset: {0}")]
    Data(String),

    #[error("empty text")]
    EmptyText,

    #[error("caption has no sentences")]
    EmptyCaption,

    #[error("unparseable attribute response: {raw}")]
    UnparseableResponse { raw: String },

    #[error("client {backend}: {message}")]
    Client { backend: String, message: String },

    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: u64, detail: String },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("triplet loss needs at least two identities in the batch")]
    SingleIdentity,

    #[error("protocol: {0}")]
    Protocol(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
