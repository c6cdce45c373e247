use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimicError {
    #[error("dimension error: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image decode error at byte {offset}: {message}")]
    Image { offset: usize, message: String },

    #[error("manifest row {row}: {message}")]
    Manifest { row: usize, message: String },

    #[error("config error ({field}): {message}")]
    Config { field: String, message: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("measurement error: {0}")]
    Measurement(String),
}

impl SimicError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        SimicError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        SimicError::Config {
            field: field.into(),
            message: message.into(),
        }
    }
}

pub type Result<T, E = SimicError> = std::result::Result<T, E>;

macro_rules! shape_err {
    ($($arg:tt)*) => {
        $crate::error::SimicError::Shape(format!($($arg)*))
    };
}
pub(crate) use shape_err;
