//! Dense tensors, reverse-mode autodiff, Adam and gradient checking.

mod adam;
pub mod gradcheck;
pub mod ops;
mod params;
mod rng;
mod tape;
mod tensor;

pub use adam::AdamState;
pub use ops::{GruWeights, Mode, RunningStats};
pub use params::{glorot_uniform, orthogonal, BufferId, ParamId, ParamStore};
pub use rng::Rng;
pub use tape::{sigmoid, Activation, BackwardFn, Gradients, Tape, Var};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum GradError {
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("index {index} at position {position} out of range for size {size}")]
    IndexOutOfRange {
        index: usize,
        position: usize,
        size: usize,
    },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("{0}")]
    InvalidArgument(String),
}
