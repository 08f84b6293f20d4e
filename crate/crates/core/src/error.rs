use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("visit {visit} references unknown code \"{code}\"")]
    DanglingCode { visit: String, code: String },

    #[error("patient {patient}: timestamps decrease at visit {visit}")]
    NonMonotone { patient: String, visit: String },

    #[error("negative time gap {gap} at position {index}")]
    NegativeGap { index: usize, gap: f64 },

    #[error("invalid cohort: {0}")]
    InvalidCohort(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("missing label \"{task}\" on visit {visit}")]
    MissingLabel { task: String, visit: String },

    #[error("loss must be a finite scalar, got {0}")]
    BadLoss(String),

    #[error("non-finite gradient for parameter {0}")]
    NonFiniteGradient(String),

    #[error("unknown parameter {0}")]
    UnknownParam(String),

    #[error("visit {0} is linked to every code; no negatives available")]
    NoNegatives(usize),

    #[error("improper density: w_t = {0} must be positive")]
    ImproperDensity(f64),

    #[error("degenerate labels: {0}")]
    DegenerateLabels(String),

    #[error("checkpoint version {found} unsupported (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
