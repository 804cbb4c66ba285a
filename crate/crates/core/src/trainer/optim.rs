use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::tensor::Tensor;

/// `peak · ½(1 + cos(π t / T))`, clamped to `[0, T]`.
pub fn cosine_lr(peak: f64, t: usize, total: usize) -> f64 {
    if total == 0 {
        return peak;
    }
    let x = t.min(total) as f64 / total as f64;
    peak * 0.5 * (1.0 + (std::f64::consts::PI * x).cos())
}

/// Global L2 norm over every gradient.
pub fn global_norm(grads: &BTreeMap<String, Tensor>) -> f64 {
    grads
        .values()
        .flat_map(|g| g.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

/// Rescales all gradients by `max_norm / norm` when the global norm exceeds
/// `max_norm`. Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip: 6.0,
        }
    }
}

/// Adam moments per parameter and the step counter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimizerState {
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
    pub t: u64,
}

/// What one step did.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepInfo {
    pub lr: f64,
    pub grad_norm: f64,
}

/// Clips, then applies one bias-corrected Adam update at learning rate `lr`
/// to every parameter that has a gradient.
pub fn optimizer_step(
    params: &mut ModelParams,
    mut grads: BTreeMap<String, Tensor>,
    state: &mut OptimizerState,
    cfg: &AdamConfig,
    lr: f64,
) -> Result<StepInfo> {
    for (name, g) in &grads {
        if !g.is_finite() {
            return Err(Error::NonFiniteGrad(name.clone()));
        }
    }
    let grad_norm = clip_global_norm(&mut grads, cfg.clip);
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (name, g) in grads {
        let p = params
            .get_mut(&name)
            .ok_or_else(|| Error::Config(format!("gradient for unknown parameter {name}")))?;
        if p.shape() != g.shape() {
            return Err(Error::shape("optimizer_step", p.shape(), g.shape()));
        }
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| vec![0.0; g.numel()]);
        let v = state.v.entry(name).or_insert_with(|| vec![0.0; g.numel()]);
        for (((w, &gi), mi), vi) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
            *w -= lr * (*mi / c1) / ((*vi / c2).sqrt() + cfg.eps);
        }
    }
    Ok(StepInfo { lr, grad_norm })
}
