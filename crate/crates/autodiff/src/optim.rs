//! Adam with optional global-norm gradient clipping.

use crate::error::{AutodiffError, Result};
use crate::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Clip the global gradient L2 norm to this value before the update.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(5.0),
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    /// Global gradient norm actually applied.
    pub applied_norm: f64,
}

/// Scales every gradient so the global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(store: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = store.global_grad_norm();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for (_, p) in store.params_mut() {
            if let Some(g) = p.tensor.grad_mut() {
                g.iter_mut().for_each(|v| *v *= scale);
            }
        }
    }
    norm
}

/// One bias-corrected Adam update over every trainable parameter, then
/// zeroes the gradients.
pub fn adam_step(store: &mut ParamStore, cfg: &AdamConfig) -> Result<StepStats> {
    for (name, p) in store.params_mut() {
        if let Some(g) = p.tensor.grad() {
            if let Some(bad) = g.iter().find(|v| !v.is_finite()) {
                return Err(AutodiffError::Training {
                    param: name.clone(),
                    reason: format!("non-finite gradient value {bad}"),
                });
            }
        }
    }
    let grad_norm = match cfg.clip_norm {
        Some(max) => clip_grad_norm(store, max),
        None => store.global_grad_norm(),
    };
    let applied_norm = store.global_grad_norm();

    for (_, p) in store.params_mut() {
        let Some(g) = p.tensor.grad().map(<[f64]>::to_vec) else {
            continue;
        };
        let st = &mut p.adam;
        st.step += 1;
        let bc1 = 1.0 - cfg.beta1.powi(st.step as i32);
        let bc2 = 1.0 - cfg.beta2.powi(st.step as i32);
        for (((w, gi), m), v) in p
            .tensor
            .data_mut()
            .iter_mut()
            .zip(&g)
            .zip(st.m.iter_mut())
            .zip(st.v.iter_mut())
        {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * gi;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * gi * gi;
            let mhat = *m / bc1;
            let vhat = *v / bc2;
            *w -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
        }
        p.tensor.zero_grad();
    }
    Ok(StepStats {
        grad_norm,
        applied_norm,
    })
}
