//! Dense tensors and a small reverse-mode differentiation tape.
//!
//! Only the operations the detector needs are provided. Everything is generic
//! over [`Scalar`]; training and gradient checks run in `f64`.

mod graph;
pub mod io;
mod scalar;
mod tensor;

use thiserror::Error;

pub use graph::{sigmoid, AttentionPattern, AttentionWeights, Gradients, Graph, Var};
pub use io::{load_tensor, read_tensor, save_tensor, write_tensor, Precision};
pub use scalar::Scalar;
pub use tensor::Tensor;

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: got shape {shape:?}, expected {expected}")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        expected: &'static str,
    },
    #[error("shape {shape:?} does not hold {len} elements")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{op}: index {index} out of range (bound {bound})")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("mask leaves row {row} with no attendable position")]
    DegenerateMask { row: usize },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("tensor file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
