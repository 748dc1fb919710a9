use serde::{Deserialize, Serialize};

use crate::error::{NnError, Result};
use crate::params::{Gradients, ParameterStore};
use crate::scalar::Scalar;

/// Adam with decoupled weight decay, global-norm clipping and linear warmup.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient norm ceiling; non-positive disables clipping.
    pub grad_clip: f64,
    pub warmup_steps: u64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
            grad_clip: 0.25,
            warmup_steps: 10_000,
        }
    }
}

impl AdamConfig {
    /// Learning rate at 1-based update `step`: `lr · min(1, step / warmup)`.
    pub fn lr_at(&self, step: u64) -> f64 {
        if self.warmup_steps == 0 {
            return self.lr;
        }
        self.lr * (step as f64 / self.warmup_steps as f64).min(1.0)
    }
}

/// What one optimizer update did.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub lr: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub clip_scale: f64,
}

/// Applies one update in place. Gradients are checked for NaN/inf before
/// anything is modified.
pub fn adam_step<T: Scalar>(
    store: &mut ParameterStore<T>,
    grads: &Gradients<T>,
    cfg: &AdamConfig,
) -> Result<StepReport> {
    for id in store.ids() {
        if let Some(g) = grads.get(id) {
            if g.shape() != store.get(id).shape() {
                return Err(NnError::Shape {
                    op: "adam_step",
                    detail: format!(
                        "gradient {:?} for `{}` {:?}",
                        g.shape(),
                        store.name(id),
                        store.get(id).shape()
                    ),
                });
            }
            if !g.is_finite() {
                return Err(NnError::NonFiniteGradient(store.name(id).to_string()));
            }
        }
    }
    let grad_norm = grads.global_norm();
    let clip_scale = if cfg.grad_clip > 0.0 && grad_norm > cfg.grad_clip {
        cfg.grad_clip / grad_norm
    } else {
        1.0
    };
    store.step += 1;
    let step = store.step;
    let lr = cfg.lr_at(step);
    let bc1 = 1.0 - cfg.beta1.powi(step.min(i32::MAX as u64) as i32);
    let bc2 = 1.0 - cfg.beta2.powi(step.min(i32::MAX as u64) as i32);
    let (b1, b2) = (T::from_f64(cfg.beta1), T::from_f64(cfg.beta2));
    let (one_b1, one_b2) = (T::from_f64(1.0 - cfg.beta1), T::from_f64(1.0 - cfg.beta2));
    let scale = T::from_f64(clip_scale);
    let step_size = T::from_f64(lr / bc1);
    let inv_bc2 = T::from_f64(1.0 / bc2);
    let eps = T::from_f64(cfg.eps);
    let decay = T::from_f64(1.0 - lr * cfg.weight_decay);

    for i in 0..store.len() {
        let values = store.values[i].data_mut();
        let m = store.first_moment[i].data_mut();
        let v = store.second_moment[i].data_mut();
        let g = grads.grads.get(i).and_then(Option::as_ref);
        for k in 0..values.len() {
            let gk = g.map_or(T::zero(), |g| g.data()[k] * scale);
            m[k] = b1 * m[k] + one_b1 * gk;
            v[k] = b2 * v[k] + one_b2 * gk * gk;
            let update = step_size * m[k] / ((v[k] * inv_bc2).sqrt() + eps);
            values[k] = values[k] * decay - update;
        }
    }
    Ok(StepReport {
        step,
        lr,
        grad_norm,
        clip_scale,
    })
}
