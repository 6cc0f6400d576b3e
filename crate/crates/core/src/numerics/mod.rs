//! Dense tensors, reverse-mode differentiation, Adam, and the LSTM cell.

mod adam;
mod graph;
pub mod init;
mod kernels;
pub mod lstm;
mod tensor;

pub use adam::{adam_step, AdamState};
pub use graph::{Elementwise, Graph, Var, BCE_EPS};
pub use tensor::Tensor;

use crate::error::Result;

/// Vector `softmax((a - max a) / tau)`.
pub fn softmax_temp(a: &Tensor, tau: f64) -> Result<Tensor> {
    let mut g = Graph::new();
    let v = g.constant(a);
    let out = g.softmax_rows(v, tau)?;
    Ok(g.to_tensor(out))
}

/// Elementwise logistic function.
pub fn sigmoid(a: &Tensor) -> Tensor {
    let mut g = Graph::new();
    let v = g.constant(a);
    let out = g.sigmoid(v);
    g.to_tensor(out)
}
