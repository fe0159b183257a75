use crate::error::{Error, Result};
use crate::numerics::Tensor;

use super::TrainConfig;

/// Linear warmup from 0 to `peak_lr`, then cosine decay to `0.1·peak_lr`.
pub fn lr_at(step: u64, cfg: &TrainConfig) -> f64 {
    let peak = cfg.peak_lr;
    let (w, total) = (cfg.warmup_steps, cfg.total_steps);
    if step < w {
        return peak * step as f64 / w as f64;
    }
    if total <= w {
        return peak;
    }
    let p = ((step - w) as f64 / (total - w) as f64).min(1.0);
    let floor = 0.1 * peak;
    floor + 0.5 * (peak - floor) * (1.0 + (std::f64::consts::PI * p).cos())
}

pub fn global_norm(grads: &[Vec<f64>]) -> f64 {
    grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt()
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`;
/// returns the factor applied.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> Result<f64> {
    let norm = global_norm(grads);
    if !norm.is_finite() {
        let (tensor, pos) = grads
            .iter()
            .enumerate()
            .find_map(|(i, g)| g.iter().position(|v| !v.is_finite()).map(|p| (i, p)))
            .unwrap_or((0, 0));
        return Err(Error::NonFinite {
            what: "gradients".into(),
            detail: format!("first bad entry in tensor #{tensor} at offset {pos}"),
        });
    }
    if norm <= max_norm {
        return Ok(1.0);
    }
    let scale = max_norm / norm;
    for v in grads.iter_mut().flatten() {
        *v *= scale;
    }
    Ok(scale)
}

/// AdamW moments. `m` and `v` follow the parameter order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamWState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl AdamWState {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let m: Vec<Tensor> = params.into_iter().map(|p| Tensor::zeros(p.shape())).collect();
        AdamWState {
            v: m.clone(),
            m,
            step: 0,
        }
    }
}

/// Whether a parameter (by dotted name) takes weight decay.
///
/// Norm gains, biases and the Mamba `A`/`D` are exempt.
pub fn decays(name: &str) -> bool {
    let last = name.rsplit('.').next().unwrap_or(name);
    let mamba = name.contains(".mamba.");
    !(last == "norm" || last == "final_norm" || (mamba && matches!(last, "b" | "a" | "d")))
}

/// One decoupled AdamW update with bias correction.
pub fn adamw_step(
    params: &mut [&mut Tensor],
    grads: &[Vec<f64>],
    decay: &[bool],
    state: &mut AdamWState,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    let n = params.len();
    if grads.len() != n || decay.len() != n || state.m.len() != n || state.v.len() != n {
        return Err(Error::contract("optimizer inputs disagree in length"));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for i in 0..n {
        let p = params[i].data_mut();
        let g = &grads[i];
        if g.len() != p.len() {
            return Err(Error::contract(format!("gradient #{i} has the wrong length")));
        }
        let wd = if decay[i] { 1.0 - lr * cfg.weight_decay } else { 1.0 };
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for k in 0..p.len() {
            p[k] *= wd;
            m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g[k];
            v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g[k] * g[k];
            let mh = m[k] / bc1;
            let vh = v[k] / bc2;
            p[k] -= lr * mh / (vh.sqrt() + cfg.adam_eps);
        }
    }
    Ok(())
}
