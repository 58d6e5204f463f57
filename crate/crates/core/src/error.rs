use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("vocabulary error: token id {id} is outside a vocabulary of size {size}")]
    Vocabulary { id: u32, size: usize },

    #[error("linkage error: caption references unknown volume id `{0}`")]
    Linkage(String),

    #[error("format error in {path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("numeric error in `{name}`: {message}")]
    Numeric { name: String, message: String },

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn dimension(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: msg.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the command-line tool:
    /// 1 validation/config, 2 IO/format, 3 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_)
            | Error::Dimension(_)
            | Error::Degenerate(_)
            | Error::Vocabulary { .. }
            | Error::Linkage(_) => 1,
            Error::Format { .. } | Error::Io { .. } | Error::Json(_) => 2,
            Error::Numeric { .. } => 3,
        }
    }
}
