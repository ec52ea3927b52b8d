use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed NIfTI header field `{field}`: {reason}")]
    Format { field: &'static str, reason: String },

    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid volume: {0}")]
    InvalidVolume(String),

    #[error("label {0} not present in mask")]
    EmptyMask(u8),

    #[error("invalid geometry: {0}")]
    Geometry(String),

    #[error("index {index} out of range (len {len})")]
    Index { index: usize, len: usize },

    #[error("volume orientation must be axis-aligned (identity direction)")]
    UnsupportedOrientation,

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("singular or malformed transform: {0}")]
    Transform(String),

    #[error("configuration error: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn format(field: &'static str, reason: impl Into<String>) -> Self {
        Error::Format { field, reason: reason.into() }
    }
}
