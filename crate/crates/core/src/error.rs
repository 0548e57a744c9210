use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Shape(String),

    #[error("invalid attention mask: {0}")]
    InvalidMask(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("invalid query: {0}")]
    InvalidQuery(String),

    #[error("contract error: {0}")]
    Contract(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("generation error: {0}")]
    Generation(String),

    #[error("parameter shape mismatch: {}", .0.join(", "))]
    ParamMismatch(Vec<String>),

    #[error("format error in {}: {msg}", path.display())]
    Format { path: PathBuf, msg: String },

    #[error("io error at {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
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

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }

    /// Short machine-readable category.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::InvalidMask(_) => "mask",
            Error::Config(_) => "config",
            Error::InvalidQuery(_) => "query",
            Error::Contract(_) => "contract",
            Error::NonFinite(_) => "non_finite",
            Error::Generation(_) => "generation",
            Error::ParamMismatch(_) => "param_mismatch",
            Error::Format { .. } => "format",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
        }
    }

    /// Usage/config problems map to exit code 1, everything else to 2.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::ParamMismatch(_) | Error::InvalidQuery(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
