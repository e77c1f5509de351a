use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    Rank { op: &'static str, expected: usize, shape: Vec<usize> },
    #[error("{op}: axis {axis} out of range for shape {shape:?}")]
    Axis { op: &'static str, axis: usize, shape: Vec<usize> },
    #[error("{op}: index {index} out of bounds (len {len})")]
    Index { op: &'static str, index: usize, len: usize },
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("mlp layers do not chain: layer {layer} expects {expected} inputs, got {got}")]
    MlpChain { layer: usize, expected: usize, got: usize },
}
