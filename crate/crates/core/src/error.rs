use alloc::string::String;
use alloc::vec::Vec;

/// Errors raised by the tensor engine and the network layers built on it.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: spatial dims {h}x{w} must be divisible by {factor}")]
    Indivisible {
        op: &'static str,
        h: usize,
        w: usize,
        factor: usize,
    },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("parameter {0} has no gradient")]
    MissingGrad(usize),
    #[error("matrix is singular (|det| = {det_abs:e})")]
    Singular { det_abs: f64 },
    #[error("flow block {block}: mixing matrix is singular (|det| = {det_abs:e})")]
    SingularBlock { block: usize, det_abs: f64 },
    #[error("non-finite value: {0}")]
    NonFinite(String),
}

pub type Result<T, E = TensorError> = core::result::Result<T, E>;
