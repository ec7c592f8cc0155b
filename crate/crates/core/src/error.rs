use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error at byte {offset}: {message}")]
    Format { offset: usize, message: String },

    #[error("coverage error at pixel (row {row}, col {col}): {message}")]
    Coverage {
        row: usize,
        col: usize,
        message: String,
    },

    #[error("unsupported shape: {0}")]
    Shape(String),

    #[error("invalid parameter: {0}")]
    Param(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("class {0} has zero association mass")]
    DegenerateClass(usize),

    #[error("{pixels} pixels exceeds the exact-inference ceiling of {ceiling}; downscale the input")]
    TooLarge { pixels: usize, ceiling: usize },

    #[error("structural error: {0}")]
    Structural(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("non-finite {what} at iteration {iteration}")]
    NonFinite { what: &'static str, iteration: usize },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("missing input: {0}")]
    Missing(String),
}

impl Error {
    /// Process exit status: 1 usage, 2 data, 3 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Param(_) | Error::Config(_) => 1,
            Error::Io { .. }
            | Error::Format { .. }
            | Error::Coverage { .. }
            | Error::Shape(_)
            | Error::TooLarge { .. }
            | Error::Structural(_)
            | Error::Checkpoint(_)
            | Error::Domain(_)
            | Error::Missing(_) => 2,
            Error::DegenerateClass(_) | Error::NonFinite { .. } => 3,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(offset: usize, message: impl Into<String>) -> Self {
        Error::Format {
            offset,
            message: message.into(),
        }
    }
}
