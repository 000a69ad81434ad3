//! Minimal dense-tensor engine: row-major matrices, a Wengert tape for
//! reverse-mode differentiation, Adam, and a finite-difference checker.

mod error;
pub mod gradcheck;
mod optim;
mod params;
mod primitive;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use optim::{adam_step, AdamConfig, AdamState};
pub use params::{Binder, ParamStore};
pub use primitive::{evaluate, evaluate_values, Primitive};
pub use tape::{softmax_rows_masked, Gradients, PoolKind, Tape, Var, DISTRIBUTION_TOL, KL_FLOOR};
pub use tensor::{Real, Shape, Tensor};

/// Row softmax of a plain tensor.
pub fn softmax_rows<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    softmax_rows_masked(x, None)
}

/// Sum of Huber terms (threshold 1) over all entries.
pub fn smooth_l1<T: Real>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<f64> {
    evaluate_values(&Primitive::SmoothL1, &[pred.clone(), target.clone()]).map(|t| t.item().f64())
}

/// Mean over rows of `KL(p_i || q_i)`, with `q` floored at [`KL_FLOOR`].
pub fn kl_rows<T: Real>(p: &Tensor<T>, q: &Tensor<T>) -> Result<f64> {
    tape::kl_rows_value(p, q)
}
