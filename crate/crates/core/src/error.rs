use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: [usize; 2],
        rhs: [usize; 2],
    },

    #[error("{op}: {msg}")]
    Domain { op: &'static str, msg: String },

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss([usize; 2]),

    #[error("{path}: line {line}: {msg}")]
    Parse {
        path: PathBuf,
        line: u64,
        msg: String,
    },

    #[error("{0}: file contains no interactions")]
    EmptyFile(PathBuf),

    #[error("dataset exhausted by filtering")]
    Exhausted,

    #[error("non-causal target: target timestamp {target} precedes last input timestamp {last}")]
    NonCausalTarget { target: i64, last: i64 },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("invalid config: {}", .0.join("; "))]
    Config(Vec<String>),

    #[error("stability violated: A = {0} must be negative")]
    StabilityViolated(f64),

    #[error("bound precondition violated: A = {0} must be <= -1")]
    BoundPrecondition(f64),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("architecture mismatch: {0}")]
    ArchitectureMismatch(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn domain(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Domain {
            op,
            msg: msg.into(),
        }
    }

    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::StabilityViolated(_) | Error::BoundPrecondition(_) => 2,
            Error::NonFinite(_) | Error::Domain { .. } => 3,
            _ => 1,
        }
    }
}
