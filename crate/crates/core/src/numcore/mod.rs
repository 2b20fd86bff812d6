//! Dense `f64` tensors, a reverse-mode computation record, finite-difference
//! gradient checking, and the adaptive-moment optimizer.

mod gradcheck;
mod graph;
pub mod ops;
mod optim;
mod tensor;

pub use gradcheck::grad_check;
pub use graph::{Gradients, Graph, NodeId};
pub use ops::Primitive;
pub use optim::{optimizer_step, AdamConfig, OptimizerState};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum NumError {
    #[error("shape {shape:?} needs {} values, got {len}", shape.iter().product::<usize>())]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: shape {shape:?} invalid, expected {expected}")]
    BadShape {
        op: &'static str,
        shape: Vec<usize>,
        expected: String,
    },
    #[error("{op} takes {expected} operands, got {got}")]
    Arity {
        op: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("unknown primitive `{0}`")]
    UnknownPrimitive(String),
    #[error("node {0} does not exist in this graph")]
    UnknownNode(usize),
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("{0}")]
    InvalidArgument(String),
}
