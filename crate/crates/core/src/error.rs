use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("sample index {index} out of range for {len} samples")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unsupported for this model kind: {0}")]
    Unsupported(String),

    #[error("power iteration did not converge within {0} iterations")]
    NoConvergence(usize),

    #[error("local step out of order: expected step {expected}, got {got}")]
    StepOrder { expected: usize, got: usize },

    #[error("incremental aggregate drifted from recompute (relative error {0:e})")]
    AggregateDrift(f64),

    #[error("non-finite parameters after {0}")]
    NonFinite(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error("incomplete trace: missing {0}")]
    IncompleteTrace(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Short machine-readable tag used in CLI error reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::IndexOutOfRange { .. } => "index_out_of_range",
            Error::EmptyDataset(_) => "empty_dataset",
            Error::Config(_) => "config",
            Error::Unsupported(_) => "unsupported",
            Error::NoConvergence(_) => "no_convergence",
            Error::StepOrder { .. } => "step_order",
            Error::AggregateDrift(_) => "aggregate_drift",
            Error::NonFinite(_) => "non_finite",
            Error::Parse { .. } => "parse",
            Error::IncompleteTrace(_) => "incomplete_trace",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
