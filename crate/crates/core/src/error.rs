use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed json in {}: {source}", path.display())]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("npy error in {}: {message}", path.display())]
    Npy { path: PathBuf, message: String },

    #[error("invalid manifest: {0}")]
    Manifest(String),

    #[error("shape mismatch for `{id}`: {detail}")]
    ShapeMismatch { id: String, detail: String },

    #[error("unknown label `{0}`")]
    UnknownLabel(String),

    #[error("intensity out of range in `{0}` after normalization")]
    IntensityRange(String),

    #[error("mask of `{0}` is empty and no fallback box is available")]
    EmptyMask(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("example `{0}` not present in the file-backed adapter")]
    MissingExample(String),

    #[error("insufficient data: {0}")]
    Insufficient(String),

    #[error("image encoding failed for {}: {message}", path.display())]
    Image { path: PathBuf, message: String },

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn in_stage(self, stage: &'static str) -> Self {
        match self {
            e @ Error::Stage { .. } => e,
            other => Error::Stage {
                stage,
                source: Box::new(other),
            },
        }
    }
}
