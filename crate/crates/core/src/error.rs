use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("undefined metric: truth contains no {missing} samples")]
    UndefinedMetric { missing: &'static str },

    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error in {context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    /// Stable machine-readable code, used by the CLI on failure.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "E_SHAPE",
            Error::Domain(_) => "E_DOMAIN",
            Error::Validation(_) => "E_VALIDATION",
            Error::Numeric(_) => "E_NUMERIC",
            Error::NonFiniteLoss { .. } => "E_NONFINITE_LOSS",
            Error::UndefinedMetric { .. } => "E_UNDEFINED_METRIC",
            Error::Format { .. } => "E_FORMAT",
            Error::Io { .. } => "E_IO",
            Error::Json { .. } => "E_JSON",
        }
    }

    /// Process exit status for the CLI. Usage errors exit with 2 (clap).
    pub fn exit_status(&self) -> i32 {
        match self {
            Error::Io { .. } => 3,
            Error::Format { .. } | Error::Json { .. } => 4,
            Error::Validation(_) => 5,
            Error::Shape { .. } | Error::Domain(_) => 6,
            Error::Numeric(_) | Error::NonFiniteLoss { .. } => 7,
            Error::UndefinedMetric { .. } => 8,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json {
            context: context.into(),
            source,
        }
    }
}
