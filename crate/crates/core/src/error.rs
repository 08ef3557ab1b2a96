use std::path::PathBuf;

/// Errors raised anywhere in the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    Shape {
        context: String,
        expected: usize,
        got: usize,
    },

    #[error("index {index} out of range 0..{bound} ({context})")]
    Index {
        context: String,
        index: usize,
        bound: usize,
    },

    #[error("non-finite value at component {index} ({context})")]
    NonFinite { context: String, index: usize },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("state error: {0}")]
    State(String),

    #[error("config error at line {line}: {message}")]
    Config { line: usize, message: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(context: impl Into<String>, expected: usize, got: usize) -> Self {
        Error::Shape {
            context: context.into(),
            expected,
            got,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable machine-readable tag, used by the CLI error record.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::Index { .. } => "index",
            Error::NonFinite { .. } => "non_finite",
            Error::Numeric(_) => "numeric",
            Error::Argument(_) => "argument",
            Error::Format { .. } => "format",
            Error::Validation(_) => "validation",
            Error::Data(_) => "data",
            Error::State(_) => "state",
            Error::Config { .. } => "config",
            Error::Io { .. } => "io",
            Error::Csv(_) => "csv",
        }
    }
}
