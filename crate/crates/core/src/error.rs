use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid tensor: {0}")]
    InvalidTensor(String),

    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),

    #[error("numerically singular: {0}")]
    Singular(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("token {token} out of range for table with {rows} rows")]
    TokenOutOfRange { token: usize, rows: usize },

    #[error("config error at `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("dataset format error: {0}")]
    DatasetFormat(String),

    #[error("probe has not been trained")]
    UntrainedProbe,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short machine-readable category, used for CLI diagnostics.
    pub fn category(&self) -> &'static str {
        match self {
            Error::ShapeMismatch { .. } | Error::InvalidTensor(_) | Error::NonScalarRoot(_) | Error::Singular(_) => {
                "numerics"
            }
            Error::InvalidSchedule(_) | Error::InvalidArgument(_) | Error::TokenOutOfRange { .. } => "argument",
            Error::Config { .. } => "config",
            Error::Diverged(_) => "diverged",
            Error::Checkpoint(_) | Error::DatasetFormat(_) | Error::Json(_) => "format",
            Error::UntrainedProbe => "eval",
            Error::Io(_) => "io",
        }
    }

    pub(crate) fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
