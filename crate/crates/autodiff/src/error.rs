use thiserror::Error;

#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("data length {len} does not match shape {shape:?}")]
    LengthMismatch { len: usize, shape: Vec<usize> },
    #[error("expected a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("tensor of shape {0:?} does not require grad")]
    NoGrad(Vec<usize>),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("line search found no sufficient decrease after {0} trials")]
    LineSearch(usize),
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T, E = AutodiffError> = std::result::Result<T, E>;
