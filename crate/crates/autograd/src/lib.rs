//! Minimal tape-based reverse-mode automatic differentiation over dense
//! CPU tensors, with the layer primitives needed by volumetric U-Nets and
//! ViT-style encoder/decoder segmenters.
//!
//! Every operation records its output on a [`Graph`] together with a
//! closure that maps the output gradient to input gradients. Parameters
//! live in a [`ParamStore`] outside the graph; a fresh graph is built for
//! each forward pass.

mod error;
mod graph;
pub mod ops;
mod params;
mod scalar;
mod tensor;

pub use error::{Error, Result};
pub use graph::{BackwardFn, Gradients, Graph, Var};
pub use params::{Param, ParamId, ParamStore};
pub use scalar::{gemm, MatRef, Scalar};
pub use tensor::{numel, strides, Tensor};

/// Numerically stable logistic function.
pub fn sigmoid<T: Scalar>(x: T) -> T {
    ops::sigmoid_scalar(x)
}
