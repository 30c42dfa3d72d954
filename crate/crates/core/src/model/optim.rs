//! AdamW with decoupled weight decay and a linear warmup/decay schedule.

use serde::{Deserialize, Serialize};

use super::transformer::Params;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWHyper {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// First and second moments for every parameter value, plus the step count.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn for_params(params: &Params) -> Self {
        let shapes: Vec<usize> = params.named().iter().map(|(_, _, v)| v.len()).collect();
        Self {
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
        }
    }
}

/// One update on a flat tensor. `step` is the 1-based step index used for
/// bias correction.
pub fn adamw_update_slice(
    params: &mut [f64],
    grads: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    hyper: &AdamWHyper,
    lr_t: f64,
    step: u64,
) {
    let bc1 = 1.0 - hyper.beta1.powi(step as i32);
    let bc2 = 1.0 - hyper.beta2.powi(step as i32);
    for i in 0..params.len() {
        let g = grads[i];
        params[i] *= 1.0 - lr_t * hyper.weight_decay;
        m[i] = hyper.beta1 * m[i] + (1.0 - hyper.beta1) * g;
        v[i] = hyper.beta2 * v[i] + (1.0 - hyper.beta2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        params[i] -= lr_t * m_hat / (v_hat.sqrt() + hyper.eps);
    }
}

/// Applies one AdamW step to every tensor. Non-finite gradients abort
/// before anything is modified.
pub fn adamw_step(
    params: &mut Params,
    grads: &Params,
    state: &mut AdamState,
    hyper: &AdamWHyper,
    lr_t: f64,
) -> Result<()> {
    let named = grads.named();
    for (name, _, vals) in &named {
        if let Some(index) = vals.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient {
                tensor: name.clone(),
                index,
            });
        }
    }
    state.step += 1;
    let step = state.step;
    for (((p, (_, _, g)), m), v) in params
        .slices_mut()
        .into_iter()
        .zip(named)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        adamw_update_slice(p, g, m, v, hyper, lr_t, step);
    }
    Ok(())
}

/// Linear warmup from 0 to 1 over `warmup` steps, then linear decay to 0 at
/// `total_steps`.
pub fn lr_schedule(step: usize, warmup: usize, total_steps: usize) -> f64 {
    if step < warmup {
        return step as f64 / warmup as f64;
    }
    if total_steps <= warmup {
        return if step >= total_steps { 0.0 } else { 1.0 };
    }
    let remaining = total_steps.saturating_sub(step) as f64;
    (remaining / (total_steps - warmup) as f64).clamp(0.0, 1.0)
}
