use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("subject {subject}: missing modality {modality} ({path})")]
    MissingModality {
        subject: String,
        modality: String,
        path: PathBuf,
    },

    #[error("subject {subject}: shape mismatch {detail}")]
    ShapeMismatch { subject: String, detail: String },

    #[error("invalid input size {input_side} for depth {depth}: {stage}")]
    InvalidInputSize {
        input_side: usize,
        depth: usize,
        stage: String,
    },

    #[error("modality {modality}: zero variance over non-background voxels")]
    ZeroVariance { modality: String },

    #[error("empty modality mask")]
    EmptyMask,

    #[error("mask arity {got} does not match {expected} modalities")]
    MaskArity { expected: usize, got: usize },

    #[error("non-finite loss {loss} at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize, loss: f32 },

    #[error("data leakage: subject {0} is part of the training fold")]
    Leakage(String),

    #[error("invalid nifti file {path}: {reason}")]
    Nifti { path: PathBuf, reason: String },

    #[error("frozen parameter {0} changed during fine-tuning")]
    FrozenParameterChanged(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
