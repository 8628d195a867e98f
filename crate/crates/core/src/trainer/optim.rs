use alloc::format;

use crate::encoder::EncoderParams;
use crate::error::{Error, Result};

/// Cosine annealing from `base_lr` at step 0 to zero at `total_steps`.
pub fn lr_at(step_index: u64, total_steps: u64, base_lr: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::InvalidConfig("cosine schedule needs at least one step".into()));
    }
    if step_index > total_steps {
        return Err(Error::OutOfRange(format!("step {step_index} beyond schedule of {total_steps}")));
    }
    let progress = step_index as f64 / total_steps as f64;
    Ok(base_lr * (1.0 + libm::cos(core::f64::consts::PI * progress)) / 2.0)
}

/// Adam moments for every encoder tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub first_moment: EncoderParams,
    pub second_moment: EncoderParams,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(params: &EncoderParams) -> Self {
        Self {
            first_moment: params.zeros_like(),
            second_moment: params.zeros_like(),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam step in place.
pub fn adam_update(state: &mut AdamState, params: &mut EncoderParams, grads: &EncoderParams, lr: f64) -> Result<()> {
    if params.config != grads.config || params.config != state.first_moment.config {
        return Err(Error::InvalidConfig("parameter, gradient and optimizer shapes differ".into()));
    }
    if !grads.is_finite() {
        return Err(Error::NonFinite("gradient contains NaN or infinity".into()));
    }
    state.step += 1;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let c1 = 1.0 - libm::pow(b1, state.step as f64);
    let c2 = 1.0 - libm::pow(b2, state.step as f64);
    let moments = state.first_moment.tensors_mut().into_iter().zip(state.second_moment.tensors_mut());
    for ((p, g), (m, v)) in params.tensors_mut().into_iter().zip(grads.tensors()).zip(moments) {
        for i in 0..p.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            p[i] -= lr * m_hat / (libm::sqrt(v_hat) + eps);
        }
    }
    Ok(())
}
