//! Reverse-mode automatic differentiation over dense tensors.
//!
//! The engine is deliberately small: tensors own contiguous row-major
//! buffers, every operator records a backward closure, and [`Tensor::backward`]
//! walks the graph once in reverse topological order, accumulating gradients
//! additively. Training instantiates the graph with `f32`; gradient checks run
//! the same code with `f64`.
//!
//! A single graph is evaluated by one thread (nodes are `Rc`-shared and not
//! `Send`); heavy operators parallelize internally over disjoint output
//! chunks, with the per-element reductions kept sequential so results are
//! bitwise reproducible for any thread count.

mod check;
mod conv;
mod ops;
mod optim;
mod params;
mod tensor;

pub use check::{central_diff_grad, max_rel_err, GradCheck};
pub use conv::{conv2d, conv3d, conv_out_dim, tconv2d, tconv3d, tconv_out_dim};
pub use ops::{add, concat, mul, reshape, scale, sub};
pub use optim::{Adam, AdamState};
pub use params::ParamStore;
pub use tensor::Tensor;

use std::fmt::{Debug, Display};

/// Scalar type the engine is generic over.
///
/// `f32` is the training type; `f64` exists so finite-difference gradient
/// checks run well below `f32` round-off.
pub trait Real:
    num_traits::Float + num_traits::NumAssignOps + std::iter::Sum + Debug + Display + Send + Sync + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Real for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}
