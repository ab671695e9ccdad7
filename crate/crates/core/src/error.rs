use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("backward already ran on this graph")]
    BackwardTwice,
    #[error("leaf `{0}` requires grad but is not reachable from the loss")]
    DetachedLeaf(String),
    #[error("non-finite value produced by `{0}`")]
    NonFinite(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("unknown config key `{key}`; valid keys: {valid}")]
    UnknownKey { key: String, valid: String },
    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize },
    #[error("gradient check failed: {0}")]
    GradCheck(String),
    #[error("weights not loaded: {0}")]
    MissingWeights(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("checksum mismatch for {0}")]
    Checksum(PathBuf),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
}
