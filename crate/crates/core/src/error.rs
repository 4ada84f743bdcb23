use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch in {dim}: expected {expected}, found {found}")]
    ShapeMismatch {
        op: &'static str,
        dim: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("{op}: expected a rank-{expected} tensor, found shape {found:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        found: Vec<usize>,
    },

    #[error("{0}")]
    Unsupported(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("label {label} at pixel {pixel} is outside [0, {channels})")]
    LabelOutOfRange {
        label: usize,
        pixel: usize,
        channels: usize,
    },

    #[error("parameter `{0}` has no gradient; run backward before stepping")]
    MissingGradient(String),

    #[error("image of {height}x{width} is smaller than the 3x3 kernel")]
    ImageTooSmall { height: usize, width: usize },

    #[error(
        "non-finite loss at iteration {iteration}: ce={ce}, ss={ss}, cc={cc}, total={total}"
    )]
    NonFiniteLoss {
        iteration: usize,
        ce: f64,
        ss: f64,
        cc: f64,
        total: f64,
    },

    #[error("ground-truth mask is empty")]
    EmptyGroundTruth,

    #[error("k = {k} exceeds the number of pixels ({pixels})")]
    TooManyClusters { k: usize, pixels: usize },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Decode { path: PathBuf, message: String },

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

    pub(crate) fn decode(path: impl Into<PathBuf>, message: impl ToString) -> Self {
        Error::Decode {
            path: path.into(),
            message: message.to_string(),
        }
    }
}
