//! Dense `f32` tensors and a small reverse-mode engine covering the layers
//! of the patch classifier: convolution, ReLU, 2x2 max pooling, global
//! average pooling, linear, softmax cross-entropy and plain SGD.

mod graph;
pub mod ops;
mod param;
mod tensor;
pub mod w32;

pub use graph::{ComputeGraph, NodeId};
pub use ops::{conv2d, cross_entropy, global_avg_pool, linear, maxpool2d, relu, softmax};
pub use param::{ParamStore, Parameter};
pub use tensor::{Shape, Tensor};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("{op}: shape mismatch between {left} and {right}")]
    ShapeMismatch { op: &'static str, left: Shape, right: Shape },
    #[error("tensor {shape} needs {expected} values, got {actual}")]
    DataLength { shape: Shape, expected: usize, actual: usize },
    #[error("max pooling needs even non-zero H and W, got {0}")]
    OddPool(Shape),
    #[error("class index {index} out of range for {classes} classes")]
    ClassIndex { index: usize, classes: usize },
    #[error("{0}: empty input")]
    Empty(&'static str),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("backward already ran on this graph")]
    GraphConsumed,
    #[error("loss must be a scalar, got {0}")]
    NonScalarLoss(Shape),
    #[error("expected {expected} parameters, got {actual}")]
    ParamCount { expected: usize, actual: usize },
    #[error("expected parameter {expected:?}, got {actual:?}")]
    ParamName { expected: String, actual: String },
    #[error("malformed .w32 data: {0}")]
    Format(String),
    #[error("{0}: {1}")]
    Io(String, std::io::Error),
}

#[cfg(test)]
mod tests;
