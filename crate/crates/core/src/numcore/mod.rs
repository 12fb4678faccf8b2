//! Minimal reverse-mode differentiable tensor kernel.
//!
//! Only the primitives the captioner needs are provided. Shapes are explicit:
//! the single broadcast is the row bias of [`Graph::add_row`].

mod checkpoint;
pub mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use checkpoint::{load_tensors, save_tensors, TensorFile, TensorRecord, TENSOR_FORMAT};
pub use graph::{Axis, Gradients, Graph, Mask, Var};
pub use params::{ParamGrads, ParamId, ParamStore};
pub use tensor::Tensor;

/// Epsilon used by every layer normalization in the crate.
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch { op: &'static str, left: Vec<usize>, right: Vec<usize> },
    #[error("invalid shape {shape:?} for {len} values")]
    InvalidShape { shape: Vec<usize>, len: usize },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("every softmax entry of a row is masked")]
    AllMasked,
    #[error("backward needs a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("index {index} out of range for {op} (len {len})")]
    IndexOutOfRange { op: &'static str, index: usize, len: usize },
    #[error("tensor file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
