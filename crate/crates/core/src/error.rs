use thiserror::Error;

/// Errors raised by the tensor engine and everything built on it.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("shape {shape:?} does not match data length {len}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("axis {axis} out of range for rank {rank}")]
    InvalidAxis { axis: usize, rank: usize },
    #[error("log of non-positive value {0}")]
    NonPositiveLog(f64),
    #[error("NaN encountered in {0}")]
    NaN(&'static str),
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("backward called on an untracked value")]
    UntrackedLoss,
    #[error("empty input to {0}")]
    Empty(&'static str),
    #[error("training diverged at step {step}: {what} is not finite")]
    Diverged { step: usize, what: &'static str },
    #[error("invalid argument: {0}")]
    Invalid(String),
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;
