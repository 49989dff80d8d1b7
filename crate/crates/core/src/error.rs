use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("unknown adapter target `{0}`")]
    UnknownTarget(String),

    #[error("adapters already merged")]
    AlreadyMerged,

    #[error("non-finite loss at step {step}: {what}")]
    NonFinite { step: usize, what: String },

    #[error("representation collapse at step {step}: assignment entropy {entropy:.4} < {threshold:.4}")]
    Collapse { step: usize, entropy: f64, threshold: f64 },

    #[error("frozen weights changed during training ({0})")]
    FrozenWeightsChanged(String),

    #[error("missing upstream artifact for stage `{stage}`: {path}")]
    MissingStage { stage: String, path: PathBuf },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("codec error: {0}")]
    Codec(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }
}
