//! AdamW with decoupled weight decay and global-norm clipping.

use serde::{Deserialize, Serialize};

use crate::dual_tower::ParamSet;
use crate::tensor::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip: Option<f64>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            clip: Some(1.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<R: Real> {
    pub step: u64,
    pub m: ParamSet<R>,
    pub v: ParamSet<R>,
}

impl<R: Real> AdamState<R> {
    pub fn new(params: &ParamSet<R>) -> Self {
        Self {
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }
}

/// `√Σ g²` over every tensor in `grads`.
pub fn global_norm<R: Real>(grads: &ParamSet<R>) -> f64 {
    grads.tensors.values().map(|g| g.sq_norm()).sum::<f64>().sqrt()
}

/// One AdamW update on the parameters named in `grads`. Returns the gradient
/// norm before clipping.
pub fn adamw_step<R: Real>(
    params: &mut ParamSet<R>,
    grads: &ParamSet<R>,
    state: &mut AdamState<R>,
    cfg: &AdamWConfig,
) -> f64 {
    let norm = global_norm(grads);
    let clip = match cfg.clip {
        Some(c) if norm > c => c / norm,
        _ => 1.0,
    };
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let (b1, b2) = (R::lit(cfg.beta1), R::lit(cfg.beta2));
    let (lr, wd, eps) = (cfg.lr, cfg.weight_decay, cfg.eps);
    for (name, g) in &grads.tensors {
        let p = params.get_mut(name);
        let m = state.m.get_mut(name);
        let v = state.v.get_mut(name);
        let c = R::lit(clip);
        for (((pi, mi), vi), &gi) in p
            .data_mut()
            .iter_mut()
            .zip(m.data_mut())
            .zip(v.data_mut())
            .zip(g.data())
        {
            let gi = gi * c;
            *mi = b1 * *mi + (R::one() - b1) * gi;
            *vi = b2 * *vi + (R::one() - b2) * gi * gi;
            let mh = mi.to_f64().unwrap() / bc1;
            let vh = vi.to_f64().unwrap() / bc2;
            let x = pi.to_f64().unwrap();
            *pi = R::lit(x - lr * (mh / (vh.sqrt() + eps) + wd * x));
        }
    }
    norm
}
