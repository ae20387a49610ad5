use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Bad user input: malformed data, inconsistent shapes, out-of-range ids.
    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("undefined distribution: item {item} has no labels")]
    UndefinedDistribution { item: usize },

    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("missing predictions for items {0:?}")]
    MissingPredictions(Vec<usize>),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("{stage} failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("config: {0}")]
    Toml(#[from] toml::de::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Wraps an error with the name of the pipeline stage that produced it.
    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage { stage, source: Box::new(self) }
    }

    /// True when the error stems from user input rather than a runtime failure.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::Invalid(_)
            | Error::UndefinedDistribution { .. }
            | Error::LengthMismatch { .. }
            | Error::MissingPredictions(_)
            | Error::Csv(_)
            | Error::Json(_)
            | Error::Toml(_) => true,
            Error::Stage { source, .. } => source.is_validation(),
            Error::Io { source, .. } => source.kind() == std::io::ErrorKind::NotFound,
            Error::NonFinite(_) => false,
        }
    }
}
