use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, SurvError>;

#[derive(Debug, Error)]
pub enum SurvError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv parse error at row {row}, column {column}: {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("time grid error: {0}")]
    Grid(String),

    #[error("non-finite gradient in parameter '{0}'")]
    NonFiniteGradient(String),

    #[error("training diverged at epoch {epoch}: {message}")]
    Divergence { epoch: usize, message: String },

    #[error("head mismatch: model head is {actual}, requested {requested}")]
    HeadMismatch { actual: String, requested: String },

    #[error("metric error: {0}")]
    Metric(String),

    #[error("censoring distribution is zero at t = {0}")]
    CensoringExhausted(f64),

    #[error("unsupported bundle version {found} (supported: {supported})")]
    Version { found: u32, supported: u32 },

    #[error("corrupt bundle: {0}")]
    Corrupt(String),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

impl SurvError {
    /// Short machine-readable category, used by the CLI's error JSON.
    pub fn kind(&self) -> &'static str {
        match self {
            SurvError::Io { .. } => "io",
            SurvError::Parse { .. } => "parse",
            SurvError::Validation(_) => "validation",
            SurvError::Shape(_) => "shape",
            SurvError::Config(_) => "config",
            SurvError::Grid(_) => "grid",
            SurvError::NonFiniteGradient(_) => "non_finite_gradient",
            SurvError::Divergence { .. } => "divergence",
            SurvError::HeadMismatch { .. } => "head_mismatch",
            SurvError::Metric(_) => "metric",
            SurvError::CensoringExhausted(_) => "censoring_exhausted",
            SurvError::Version { .. } => "version",
            SurvError::Corrupt(_) => "corrupt",
            SurvError::Serde(_) => "serde",
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        SurvError::Io {
            path: path.into(),
            source,
        }
    }
}
