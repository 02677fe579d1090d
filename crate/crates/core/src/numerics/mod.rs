//! Dense tensors and a recording tape for reverse-mode differentiation.

mod graph;
mod kernels;
mod real;
mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use kernels::{
    bilinear_resize, cross_entropy, gelu, kl_divergence, layer_norm, matmul, softmax_lastaxis,
    LAYER_NORM_EPS, PROB_FLOOR,
};
pub use real::Real;
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NumericsError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("shape {shape:?} has a zero extent")]
    ZeroExtent { shape: Vec<usize> },
    #[error("shape {shape:?} needs {} elements, got {len}", shape.iter().product::<usize>())]
    ElementCount { shape: Vec<usize>, len: usize },
    #[error("cannot reshape {from:?} into {to:?}")]
    ReshapeMismatch { from: Vec<usize>, to: Vec<usize> },
    #[error("label {label} out of range for {classes} classes")]
    InvalidLabel { label: usize, classes: usize },
    #[error("{labels} labels for a batch of {batch}")]
    LabelCount { labels: usize, batch: usize },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("variable was not recorded on this graph")]
    UnrecordedVar,
    #[error("no gradient reached this variable")]
    NoGradient,
    #[error("{0}")]
    InvalidArgument(String),
}
