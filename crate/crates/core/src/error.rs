use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("keypoints are degenerate (collinear): rotation is underdetermined")]
    DegenerateKeypoints,

    #[error("empty list: {0}")]
    EmptyList(&'static str),

    #[error("direction is not unit length (norm {0})")]
    NotUnit(f64),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("negative density {value} at sample {index}")]
    NegativeDensity { index: usize, value: f64 },

    #[error("input too small: {0}")]
    TooSmall(String),

    #[error("value out of range: {0}")]
    OutOfRange(String),

    #[error("missing context for latent initialization `{0}`")]
    MissingContext(&'static str),

    #[error("malformed file {path}: {reason}")]
    MalformedFile { path: PathBuf, reason: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn malformed(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::MalformedFile {
            path: path.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
