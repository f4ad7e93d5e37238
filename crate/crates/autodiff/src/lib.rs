//! Dense reverse-mode automatic differentiation over `f64` tensors.
//!
//! The backward pass is itself recorded as graph operations, so gradients
//! can be differentiated again. This is what gradient-matching
//! reconstruction and robust-data synthesis both need: a scalar function of
//! `d loss / d params`, differentiated with respect to the input.
//!
//! ```
//! use glab_autodiff::{grad, Tensor};
//!
//! let w = Tensor::variable(vec![3.0], &[1]).unwrap();
//! let y = w.square().sum();
//! let dy = grad(&y, &[w.clone()], true).unwrap().remove(0); // 2w
//! let s = dy.square().sum(); // 4w^2
//! let ds = grad(&s, &[w], false).unwrap().remove(0); // 8w
//! assert_eq!(ds.data(), &[24.0]);
//! ```

mod backward;
mod error;
mod gradvec;
pub mod kernels;
pub mod optim;
mod tensor;

pub use backward::{grad, value_and_grad};
pub use error::{AutodiffError, Result};
pub use gradvec::GradientVector;
pub use optim::{minimize, Adam, Lbfgs, Optimizer, OptimizerKind, PlainGd};
pub use tensor::{is_grad_enabled, no_grad, Tensor};

/// Primal value of a scalar graph root.
pub fn evaluate(root: &Tensor) -> Result<f64> {
    root.item()
}

/// Differentiates a scalar function of first-order parameter gradients with
/// respect to the input.
///
/// `loss` must have been built from `input` and `params` (all
/// gradient-tracking leaves). `objective` receives the differentiable
/// gradients `d loss / d params` and returns a scalar. Returns the
/// objective's value and its gradient with respect to `input`.
pub fn grad_through_grad(
    input: &Tensor,
    params: &[Tensor],
    loss: &Tensor,
    objective: impl FnOnce(&[Tensor]) -> Result<Tensor>,
) -> Result<(f64, Tensor)> {
    let l = loss.item()?;
    if !l.is_finite() {
        return Err(AutodiffError::NonFinite(format!(
            "loss is {l} (input shape {:?}, {} parameter tensors)",
            input.shape(),
            params.len()
        )));
    }
    let grads = grad(loss, params, true)?;
    let obj = objective(&grads)?;
    let v = obj.item()?;
    if !v.is_finite() {
        return Err(AutodiffError::NonFinite(format!("gradient objective is {v}")));
    }
    let dx = grad(&obj, std::slice::from_ref(input), false)?.remove(0);
    Ok((v, dx))
}
