use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Every violation found while validating a configuration, reported together.
    #[error("invalid configuration: {}", .0.join("; "))]
    Config(Vec<String>),

    #[error("{}: {message}", .path.display())]
    Data { path: PathBuf, message: String },

    #[error("episode construction failed: {0}")]
    Episode(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error("non-finite value at episode {episode}: {what}")]
    NonFinite { episode: usize, what: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn data(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Data {
            path: path.into(),
            message: msg.into(),
        }
    }
}
