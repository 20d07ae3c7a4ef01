use thiserror::Error;

#[derive(Debug, Error)]
pub enum LabError {
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),

    #[error("timestep {t} outside 1..={max}")]
    TimestepOutOfRange { t: usize, max: usize },

    #[error("dimension mismatch: expected {expected}, got {got} ({context})")]
    DimensionMismatch {
        expected: usize,
        got: usize,
        context: &'static str,
    },

    #[error("non-finite value at graph node {node} ({op})")]
    NonFinite { node: usize, op: &'static str },

    #[error("graph input `{0}` is not bound")]
    UnboundInput(String),

    #[error("graph has no input named `{0}`")]
    UnknownInput(String),

    #[error("gradient requires a scalar output, output has dimension {0}")]
    NonScalarOutput(usize),

    #[error("graph has not been evaluated")]
    NotEvaluated,

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("training diverged at step {step}")]
    Diverged { step: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("config error at `{path}`: {msg}")]
    Config { path: String, msg: String },

    #[error("trajectory {index} aborted at t={t}: {reason}")]
    TrajectoryAborted {
        index: usize,
        t: usize,
        reason: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, LabError>;

pub(crate) fn check_dim(expected: usize, got: usize, context: &'static str) -> Result<()> {
    if expected != got {
        return Err(LabError::DimensionMismatch {
            expected,
            got,
            context,
        });
    }
    Ok(())
}
