use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A file could be read but its contents are malformed. `field` names the
    /// header entry, tag or structure that failed.
    #[error("{format} parse error in `{field}`: {message}")]
    Parse {
        format: &'static str,
        field: String,
        message: String,
    },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("no cases found under {0}")]
    NoCases(PathBuf),

    #[error("too few cases for dataset {dataset}: found {found}, need at least {required}")]
    TooFewCases {
        dataset: String,
        found: usize,
        required: usize,
    },

    #[error("missing {0}")]
    Missing(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image encoding error: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(
        format: &'static str,
        field: impl Into<String>,
        message: impl Into<String>,
    ) -> Self {
        Error::Parse {
            format,
            field: field.into(),
            message: message.into(),
        }
    }
}
