//! Dense `f32` tensors and a reverse-mode tape.
//!
//! Values live in immutable [`Tensor`]s. A [`Graph`] records every primitive
//! applied to them and can sweep backwards once from a scalar loss to fill
//! leaf gradients. Reductions accumulate in `f64`.

mod error;
mod gradcheck;
mod graph;
mod kernels;
mod tensor;

pub use error::{NumError, Result};
pub use gradcheck::{grad_check, grad_check_components, GradCheckReport};
pub use graph::{Graph, Var, LAYER_NORM_EPS};
pub use tensor::Tensor;

/// Numerically stable logistic function.
pub fn sigmoid(v: f32) -> f32 {
    graph::sigmoid(v)
}
