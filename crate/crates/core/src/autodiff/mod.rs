//! Dense tensors with reverse-mode automatic differentiation.
//!
//! The graph is rebuilt on every forward pass. Tensors are 64-bit and
//! row-major; row-wise operations (softmax, standardize, row broadcasting)
//! act on the last axis. `log` clamps its input at [`LOG_EPS`] so that
//! `0 * log 0` evaluates to `0` with a zero gradient.

mod graph;
mod tensor;

pub use graph::{softmax_in_place, ComputationNode, Graph, Var};
pub use tensor::Tensor;

pub(crate) use graph::clamped_ln;

use thiserror::Error;

/// Lower clamp applied before every logarithm.
pub const LOG_EPS: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("shape {shape:?} does not hold {len} values")]
    InvalidShape { shape: Vec<usize>, len: usize },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
}

/// Row-wise softmax on a plain tensor.
pub fn softmax(logits: &Tensor) -> Tensor {
    let mut g = Graph::new();
    let x = g.constant(logits.clone());
    let p = g.softmax(x);
    g.value(p).clone()
}

#[cfg(test)]
pub(crate) mod testing {
    use super::*;

    /// Central finite-difference gradient of `f` with respect to `x`.
    pub fn finite_difference(x: &Tensor, h: f64, f: impl Fn(&Tensor) -> f64) -> Vec<f64> {
        let mut grad = Vec::with_capacity(x.numel());
        let mut probe = x.clone();
        for i in 0..x.numel() {
            let orig = probe.data()[i];
            probe.data_mut()[i] = orig + h;
            let up = f(&probe);
            probe.data_mut()[i] = orig - h;
            let down = f(&probe);
            probe.data_mut()[i] = orig;
            grad.push((up - down) / (2.0 * h));
        }
        grad
    }

    pub fn relative_error(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
    }
}
