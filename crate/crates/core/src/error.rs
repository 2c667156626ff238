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

    #[error("format error in {what} at {location}: {message}")]
    Format {
        what: String,
        location: String,
        message: String,
    },

    #[error("index {index} out of range (size {size})")]
    IndexOutOfRange { index: i64, size: usize },

    #[error("invalid mesh: {0}")]
    InvalidMesh(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("shape error in layer {layer}: {message}")]
    LayerShape { layer: usize, message: String },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("empty surface: the level set does not cross the grid")]
    EmptySurface,

    #[error("all {0} constraint rows are degenerate")]
    DegenerateConstraints(usize),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("matrix is not positive definite (pivot {pivot} = {value:e})")]
    NotPositiveDefinite { pivot: usize, value: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unreachable shapes from template: {0:?}")]
    Unreachable(Vec<usize>),

    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(
        what: impl Into<String>,
        location: impl Into<String>,
        message: impl Into<String>,
    ) -> Self {
        Error::Format {
            what: what.into(),
            location: location.into(),
            message: message.into(),
        }
    }

    pub(crate) fn stage(stage: &str, source: Error) -> Self {
        Error::Stage {
            stage: stage.to_string(),
            source: Box::new(source),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
