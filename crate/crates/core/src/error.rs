//! Error type shared by every module of the crate.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// Covariance plugin that is not symmetric positive semi-definite.
    #[error("decomposition failed: {0}")]
    Decomposition(String),

    #[error("label error: {0}")]
    Label(String),

    #[error("negative count {value} at row {row}, column {col}")]
    NegativeCount { row: usize, col: usize, value: i64 },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("degenerate data: {0}")]
    DegenerateData(String),

    #[error("zero variance: {0}")]
    ZeroVariance(String),

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("dimension mismatch: {0}")]
    DimMismatch(String),

    #[error("value out of range: {0}")]
    Range(String),

    #[error("outside the domain of the formula: {0}")]
    Domain(String),

    #[error("no convergence: {0}")]
    Convergence(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{path}:{line}: negative entry {value}")]
    NegativeEntry {
        path: PathBuf,
        line: usize,
        value: i64,
    },

    #[error("duplicate id `{0}`")]
    DuplicateId(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("pipeline stage `{stage}` failed at {point}: {source}")]
    Pipeline {
        stage: &'static str,
        point: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Coarse classification used to map failures onto process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Numeric,
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) | Error::Parameter(_) | Error::Json(_) => ErrorClass::Config,
            Error::Decomposition(_)
            | Error::DegenerateData(_)
            | Error::ZeroVariance(_)
            | Error::Domain(_)
            | Error::Convergence(_) => ErrorClass::Numeric,
            Error::Pipeline { source, .. } => source.class(),
            _ => ErrorClass::Data,
        }
    }

    pub(crate) fn in_stage(self, stage: &'static str, point: impl Into<String>) -> Error {
        Error::Pipeline {
            stage,
            point: point.into(),
            source: Box::new(self),
        }
    }
}
