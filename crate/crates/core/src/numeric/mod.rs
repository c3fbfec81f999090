//! Dense tensors and reverse-mode differentiation.

mod gradcheck;
mod graph;
pub mod nn;
mod real;
mod tensor;

pub use gradcheck::{grad_check, relative_error, GradCheckReport, REL_ERR_FLOOR};
pub use graph::{softmax_in_place, Graph, Var};
pub use nn::{layer_norm, linear as linear_forward, multi_head_self_attention, AttentionVars, BlockVars};
pub use real::Real;
pub use tensor::Tensor;

/// Softmax of a slice, computed with max subtraction.
pub fn softmax<T: Real>(x: &[T]) -> Vec<T> {
    let mut out = x.to_vec();
    softmax_in_place(&mut out);
    out
}
