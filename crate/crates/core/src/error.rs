use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch, expected {expected}, got {got}")]
    ShapeMismatch {
        op: &'static str,
        expected: String,
        got: String,
    },

    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("roi ({x1}, {y1}, {x2}, {y2}) is degenerate after mapping to a {w}x{h} feature map")]
    DegenerateRoi {
        x1: f32,
        y1: f32,
        x2: f32,
        y2: f32,
        w: usize,
        h: usize,
    },

    #[error("image {h}x{w} is smaller than the backbone stride {stride}")]
    ImageTooSmall { h: usize, w: usize, stride: usize },

    #[error("partition index {index} out of range ({count} partitions)")]
    PartitionOutOfRange { index: usize, count: usize },

    #[error("parameter `{0}` has no gradient")]
    MissingGrad(String),

    #[error("non-finite loss at iteration {iter}: {detail}")]
    NonFiniteLoss { iter: usize, detail: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config: {0}")]
    Config(String),

    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err(op: &'static str, expected: impl ToString, got: impl ToString) -> Error {
    Error::ShapeMismatch {
        op,
        expected: expected.to_string(),
        got: got.to_string(),
    }
}

pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Error {
    Error::InvalidArgument {
        op,
        msg: msg.into(),
    }
}
