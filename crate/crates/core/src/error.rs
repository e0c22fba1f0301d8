use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the imputation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at row {row}: {message}")]
    Parse { row: usize, message: String },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("column `{0}` has no observed cells and cannot be scaled")]
    UnscalableColumn(String),

    #[error("invalid mask: {0}")]
    InvalidMask(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("simulator error: {0}")]
    Simulator(String),

    #[error("context format error: {0}")]
    ContextFormat(String),

    #[error("context embeddings missing for columns: {}", .0.join(", "))]
    ContextCoverage(Vec<String>),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("checkpoint schema mismatch")]
    SchemaMismatch,

    #[error("row {0} has no observed features")]
    EmptyRow(usize),

    #[error("metric error: {0}")]
    Metric(String),

    #[error("degenerate test: differences have zero variance")]
    DegenerateTest,

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable category, used as the prefix of CLI error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Parse { .. } => "parse",
            Error::Schema(_) => "schema",
            Error::InvalidArgument(_) => "invalid-argument",
            Error::Shape(_) => "shape",
            Error::UnscalableColumn(_) => "unscalable-column",
            Error::InvalidMask(_) => "invalid-mask",
            Error::InvalidInput(_) => "invalid-input",
            Error::Simulator(_) => "simulator",
            Error::ContextFormat(_) => "context-format",
            Error::ContextCoverage(_) => "context-coverage",
            Error::Config(_) => "config",
            Error::Numeric(_) => "numeric",
            Error::Checkpoint(_) => "checkpoint",
            Error::SchemaMismatch => "checkpoint-schema",
            Error::EmptyRow(_) => "empty-row",
            Error::Metric(_) => "metric",
            Error::DegenerateTest => "degenerate-test",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
