use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: invalid input shape {shape:?} (expected {expected})")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        expected: String,
    },
    #[error("tensor data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("backward already ran on this tape; call reset() first")]
    BackwardAlreadyRun,
    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },
    #[error("{0}")]
    InvalidArgument(String),
    #[error("persistent tensors must be registered before any transient node")]
    PersistentAfterTransient,
    #[error("node {0} is not a persistent tensor of this graph")]
    NotPersistent(usize),
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;
