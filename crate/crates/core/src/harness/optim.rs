use serde::{Deserialize, Serialize};

use crate::error::{HotError, Result};

fn check(params: &[f32], grads: &[f32]) -> Result<()> {
    if params.len() != grads.len() {
        return Err(HotError::Shape {
            op: "optimizer step",
            left: (params.len(), 1),
            right: (grads.len(), 1),
        });
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(HotError::invalid("non-finite gradient passed to the optimizer"));
    }
    Ok(())
}

pub fn sgd_step(params: &mut [f32], grads: &[f32], lr: f32) -> Result<()> {
    check(params, grads)?;
    for (p, g) in params.iter_mut().zip(grads) {
        *p -= lr * g;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

/// AdamW with bias correction and decoupled weight decay
/// (`p ← p − lr·wd·p` before the adaptive step).
pub fn adamw_step(params: &mut [f32], grads: &[f32], state: &mut AdamState, lr: f64, hyper: &AdamHyper) -> Result<()> {
    check(params, grads)?;
    if state.m.is_empty() {
        state.m = vec![0.0; params.len()];
        state.v = vec![0.0; params.len()];
    } else if state.m.len() != params.len() {
        return Err(HotError::Shape {
            op: "adamw_step state",
            left: (state.m.len(), 1),
            right: (params.len(), 1),
        });
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - hyper.beta1.powi(t);
    let bc2 = 1.0 - hyper.beta2.powi(t);
    for ((p, &g), (m, v)) in params.iter_mut().zip(grads).zip(state.m.iter_mut().zip(state.v.iter_mut())) {
        let g = g as f64;
        let mut w = *p as f64;
        w -= lr * hyper.weight_decay * w;
        *m = hyper.beta1 * *m + (1.0 - hyper.beta1) * g;
        *v = hyper.beta2 * *v + (1.0 - hyper.beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        w -= lr * m_hat / (v_hat.sqrt() + hyper.eps);
        *p = w as f32;
    }
    Ok(())
}

/// Cosine annealing from `base` at step 0 to `min` at `total`.
pub fn cosine_lr(base: f64, min: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    let frac = (step.min(total)) as f64 / total as f64;
    min + 0.5 * (base - min) * (1.0 + (std::f64::consts::PI * frac).cos())
}
