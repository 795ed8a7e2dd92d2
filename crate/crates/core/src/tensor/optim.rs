use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Grads, ParamStore, ParamVars, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moment buffers for one tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }
}

/// One bias-corrected Adam update of `theta` in place.
pub fn adam_step(
    theta: &mut [f64],
    grad: &[f64],
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    if theta.len() != grad.len() || theta.len() != state.m.len() {
        return Err(Error::Shape {
            op: "adam_step",
            lhs: vec![theta.len()],
            rhs: vec![grad.len()],
        });
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for i in 0..theta.len() {
        let g = grad[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        theta[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    Ok(())
}

/// Adam over a [`ParamStore`], keyed by parameter name.
#[derive(Debug, Clone)]
pub struct Adam {
    pub cfg: AdamConfig,
    states: BTreeMap<String, AdamState>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Self { cfg, states: BTreeMap::new() }
    }

    /// Update every parameter that received a gradient. Parameters absent
    /// from `grads` (frozen or unused) are left untouched.
    pub fn step(&mut self, params: &mut ParamStore, vars: &ParamVars, grads: &Grads) -> Result<()> {
        for (name, var) in vars.iter() {
            let Some(g) = grads.get(var) else { continue };
            let theta = params
                .get_mut(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))?;
            let state = self
                .states
                .entry(name.to_string())
                .or_insert_with(|| AdamState::new(theta.numel()));
            adam_step(theta.data_mut(), g.data(), state, &self.cfg)?;
        }
        Ok(())
    }

    /// Same as [`Adam::step`] with gradients supplied by name.
    pub fn step_named(&mut self, params: &mut ParamStore, grads: &[(String, Tensor)]) -> Result<()> {
        for (name, g) in grads {
            let theta = params
                .get_mut(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))?;
            let state = self
                .states
                .entry(name.clone())
                .or_insert_with(|| AdamState::new(theta.numel()));
            adam_step(theta.data_mut(), g.data(), state, &self.cfg)?;
        }
        Ok(())
    }
}
