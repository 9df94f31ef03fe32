//! Dense tensors, reverse-mode differentiation and a finite-difference oracle.

pub mod graph;
pub mod linalg;
mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use linalg::{matmul, matmul_t, softmax, transpose};
pub use tensor::Tensor;

use crate::error::{Error, Result};

/// Central-difference gradient `(f(x+εeᵢ) − f(x−εeᵢ)) / 2ε` of a scalar function.
pub fn finite_diff_gradient<F>(mut f: F, x: &Tensor, eps: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if eps.is_nan() || eps <= 0.0 {
        return Err(Error::contract(format!(
            "finite difference step must be positive, got {eps}"
        )));
    }
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (up - down) / (2.0 * eps);
    }
    Ok(grad)
}
