use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid target distribution: row {row} sums to {sum}")]
    InvalidTarget { row: usize, sum: f64 },

    #[error("numeric instability: {0}")]
    NumericInstability(String),

    #[error("non-finite gradient for parameter `{param}`")]
    NonFiniteGradient { param: String },

    #[error("non-finite loss at epoch {epoch}, batch ids {batch_ids:?}")]
    NonFiniteLoss { epoch: usize, batch_ids: Vec<String> },

    #[error("invalid input: {0}")]
    Input(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },

    #[error("verification failed: {0}")]
    Verification(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Prefixes the message with `context`, keeping the code and exit status.
    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }

    /// Stable machine-readable code, printed on the first line of CLI errors.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Config(_) => "CONFIG_ERROR",
            Error::Input(_) | Error::Data(_) | Error::Parse { .. } | Error::Io { .. } | Error::Json(_) => "DATA_ERROR",
            Error::Dimension { .. } => "DIMENSION_ERROR",
            Error::InvalidTarget { .. } => "INVALID_TARGET",
            Error::NumericInstability(_) | Error::NonFiniteGradient { .. } | Error::NonFiniteLoss { .. } => {
                "NUMERIC_FAILURE"
            }
            Error::Verification(_) => "VERIFICATION_FAILURE",
            Error::Context { source, .. } => source.code(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Dimension { .. } => 2,
            Error::Input(_)
            | Error::Data(_)
            | Error::Parse { .. }
            | Error::Io { .. }
            | Error::Json(_)
            | Error::InvalidTarget { .. } => 3,
            Error::NumericInstability(_) | Error::NonFiniteGradient { .. } | Error::NonFiniteLoss { .. } => 4,
            Error::Verification(_) => 5,
            Error::Context { source, .. } => source.exit_code(),
        }
    }
}
