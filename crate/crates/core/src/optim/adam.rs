use serde::{Deserialize, Serialize};

use super::TrainingSchedule;
use crate::error::{CalmError, Result};
use crate::tensor::{ParamSet, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay, applied as `lr * weight_decay * theta`.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

/// Adam moments for every parameter of one model, in parameter order.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
}

impl AdamState {
    pub fn new(params: &ParamSet, config: AdamConfig) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.value.shape().to_vec())).collect();
        Self { config, m: zeros(), v: zeros(), step: 0 }
    }

    /// Updates taken so far.
    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, i: usize) -> &Tensor {
        &self.m[i]
    }

    /// One bias-corrected Adam update; `lr_for_group` gives the learning
    /// rate of each layer group. Nothing is modified if any gradient is
    /// non-finite.
    pub fn update(&mut self, params: &mut ParamSet, lr_for_group: impl Fn(usize) -> f64) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(CalmError::contract("optimizer state does not match the parameter set"));
        }
        for p in params.iter() {
            if p.grad.data().iter().any(|g| !g.is_finite()) {
                return Err(CalmError::NonFiniteGradient(p.name.clone()));
            }
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps, weight_decay } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let lr = lr_for_group(p.layer_group);
            let values = p.value.data_mut();
            for (((theta, &g), mi), vi) in values.iter_mut().zip(p.grad.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *mi = beta1 * *mi + (1.0 - beta1) * g;
                *vi = beta2 * *vi + (1.0 - beta2) * g * g;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *theta -= lr * (m_hat / (v_hat.sqrt() + eps) + weight_decay * *theta);
            }
        }
        Ok(())
    }
}

/// Adam update at schedule step `t`, with layerwise rates from the schedule.
pub fn adam_step(params: &mut ParamSet, state: &mut AdamState, schedule: &TrainingSchedule, t: usize) -> Result<()> {
    let base = schedule.lr_at(t)?;
    let top = params.max_layer_group();
    state.update(params, |group| schedule.layer_lr(base, group, top))
}
