use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("gear {0} is outside 1..={max}", max = crate::vehicle::NUM_GEARS)]
    InvalidGear(i64),

    #[error("invalid input: {0}")]
    InvalidParams(String),

    #[error("backup feasibility assumption fails for {failed} of 12 gear-range endpoints")]
    BackupAssumption { failed: usize },

    #[error("length mismatch: {what} has {got} entries, expected {expected}")]
    LengthMismatch { what: &'static str, got: usize, expected: usize },

    #[error("gear schedule skips a gear between steps {0} and {}", .0 + 1)]
    GearSkip(usize),

    #[error("horizon must be at least {min}, got {got}")]
    Horizon { min: usize, got: usize },

    #[error("velocity {0} m/s has no feasible gear")]
    NoFeasibleGear(f64),

    #[error("weight matrix is not symmetric positive definite")]
    WeightNotPd,

    #[error("operation requires an optimal solution, got {0:?}")]
    NotOptimal(crate::nlp::SolveStatus),

    #[error("backup schedule failed to produce a solution at step {step}: {status:?}")]
    BackupFailed { step: usize, status: crate::nlp::SolveStatus },

    #[error("controller failed at step {step}: {reason}")]
    Controller { step: usize, reason: String },

    #[error("{0}")]
    Training(String),

    #[error("model file error: {0}")]
    ModelFormat(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
