//! Minimal differentiable-tensor substrate.
//!
//! A [`Graph`] is a Wengert tape: every operator appends a node holding its
//! output value, and [`Graph::backward`] replays the tape in reverse. Graphs are
//! rebuilt for every forward pass; parameters enter as leaves and their
//! gradients are read back after `backward`.

mod adamw;
mod gradcheck;
mod graph;
pub mod kernels;
mod tensor;

pub use adamw::{adamw_step, AdamW, AdamWState};
pub use gradcheck::{grad_check, GradCheck, GradCheckReport};
pub use graph::{Graph, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("expected rank {expected}, got shape {shape:?}")]
    Rank { expected: usize, shape: Vec<usize> },
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("shape {0:?} has a zero extent")]
    ZeroExtent(Vec<usize>),
    #[error("cannot reshape {from:?} into {to:?}")]
    Reshape { from: Vec<usize>, to: Vec<usize> },
    #[error("axis {axis} out of range for rank {rank}")]
    Axis { axis: usize, rank: usize },
    #[error("layer norm eps must be positive, got {0}")]
    InvalidEps(f32),
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),
    #[error("gather index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("{op}: extent {extent} is not divisible by {divisor}")]
    Indivisible {
        op: &'static str,
        extent: usize,
        divisor: usize,
    },
    #[error("concat of zero tensors")]
    EmptyConcat,
    #[error("learning rate must be positive, got {0}")]
    InvalidLearningRate(f32),
}
