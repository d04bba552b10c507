//! Crate-wide error type.

use std::path::PathBuf;

/// Errors raised anywhere in the editing pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid basis: {0}")]
    InvalidBasis(String),

    #[error("ill-conditioned system: {0}")]
    IllConditioned(String),

    #[error("factorization failed: {0}")]
    Factorization(String),

    #[error("degenerate spectrum: all singular values are zero")]
    DegenerateSpectrum,

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("corpus generation failed: {0}")]
    Generation(String),

    #[error("parse error at line {line}, field `{field}`: {message}")]
    Parse {
        line: usize,
        field: String,
        message: String,
    },

    #[error("unknown token `{0}`")]
    Vocabulary(String),

    #[error("index out of range: {0}")]
    Index(String),

    #[error("training failed: recall {recall:.4} below target {target:.4} after {steps} steps")]
    TrainingFailed {
        recall: f64,
        target: f64,
        steps: usize,
    },

    #[error("optimization diverged: {0}")]
    Optimization(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("undefined ratio: {0}")]
    UndefinedRatio(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("missing artifact {path}: run `{producer}` first")]
    MissingArtifact { path: PathBuf, producer: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable kind tag used in CLI error records.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidInput(_) => "invalid_input",
            Error::InvalidBasis(_) => "invalid_basis",
            Error::IllConditioned(_) => "ill_conditioned",
            Error::Factorization(_) => "factorization",
            Error::DegenerateSpectrum => "degenerate_spectrum",
            Error::DimensionMismatch(_) => "dimension_mismatch",
            Error::Generation(_) => "generation",
            Error::Parse { .. } => "parse",
            Error::Vocabulary(_) => "vocabulary",
            Error::Index(_) => "index",
            Error::TrainingFailed { .. } => "training_failed",
            Error::Optimization(_) => "optimization",
            Error::InsufficientData(_) => "insufficient_data",
            Error::UndefinedRatio(_) => "undefined_ratio",
            Error::Config(_) => "config",
            Error::MissingArtifact { .. } => "missing_artifact",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
