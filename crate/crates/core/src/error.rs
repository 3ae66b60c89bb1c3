use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("stroke file line {line}: {message}")]
    MalformedRecord { line: usize, message: String },

    #[error("unknown category `{name}` (known: {known})")]
    UnknownCategory { name: String, known: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("image size {width}x{height} is not a multiple of the total stride {stride}")]
    NotDivisible {
        width: usize,
        height: usize,
        stride: usize,
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid label {0} (labels must be 0 or 1)")]
    InvalidLabel(u8),

    #[error("box {0:?} lies entirely outside the feature extent")]
    BoxOutside([f64; 4]),

    #[error("checkpoint digest mismatch: file has {found}, model expects {expected}")]
    DigestMismatch { expected: String, found: String },

    #[error("checkpoint format: {0}")]
    Checkpoint(String),

    #[error("invalid {field}: {message}")]
    Validation { field: String, message: String },

    #[error("image decode: {0}")]
    Decode(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn validation(field: &str, message: impl Into<String>) -> Self {
        Error::Validation {
            field: field.to_string(),
            message: message.into(),
        }
    }
}
