use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("lesion {0} is not present in the mask")]
    MissingLesion(u32),

    #[error("point {point:?} lies outside a volume of shape {shape:?}")]
    OutOfBounds { point: [i64; 3], shape: [usize; 3] },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid volume: {0}")]
    InvalidVolume(String),

    #[error("generation failed: {0}")]
    Generation(String),

    #[error("case {0} carries no deformation field")]
    MissingField(String),

    #[error("no training sample has a lesion present at follow-up")]
    EmptyTask,

    #[error("configuration error: {0}")]
    Config(String),

    #[error("length mismatch: {predictions} predictions for {lesions} lesions")]
    Alignment { predictions: usize, lesions: usize },

    #[error("empty input")]
    EmptyInput,

    #[error("parse error in {context}: {message}")]
    Parse { context: String, message: String },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("validation error: {0}")]
    Validation(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn parse(context: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse { context: context.into(), message: message.into() }
    }
}
