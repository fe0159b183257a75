//! Dense tensors, reverse-mode autodiff, and a finite-difference oracle.

pub mod ops;
mod tape;
mod tensor;

pub use ops::{
    cross_entropy, depthwise_conv1d_causal, inverse_softplus, matmul, rmsnorm, silu,
    softmax_lastdim, softplus,
};
pub use tape::{CustomOp, Tape, Var};
pub use tensor::{max_abs_diff, Tensor};

use crate::error::{Error, Result};

/// Central differences `(f(θ+h·e_i) − f(θ−h·e_i)) / 2h` for every coordinate.
pub fn finite_diff_grad<F>(mut f: F, theta: &Tensor, h: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> f64,
{
    if !(h > 0.0) {
        return Err(Error::contract("finite-difference step must be positive"));
    }
    let mut probe = theta.clone();
    let mut out = vec![0.0; theta.numel()];
    for (i, o) in out.iter_mut().enumerate() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let fp = f(&probe);
        probe.data_mut()[i] = orig - h;
        let fm = f(&probe);
        probe.data_mut()[i] = orig;
        *o = (fp - fm) / (2.0 * h);
    }
    Ok(Tensor::from_parts(theta.shape().to_vec(), out))
}

/// Worst-case disagreement between an analytic and a numeric gradient:
/// relative error where `|analytic| ≥ floor`, absolute error below it.
pub fn grad_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| {
            let diff = (a - n).abs();
            if a.abs() < floor {
                diff
            } else {
                diff / a.abs().max(n.abs())
            }
        })
        .fold(0.0, f64::max)
}
