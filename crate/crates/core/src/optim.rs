//! ADAM with decoupled weight decay, switchable bias correction and a linear
//! warmup/decay schedule.

use std::collections::HashMap;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::encoder::Params;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub bias_correction: bool,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            bias_correction: true,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            problems.push(format!("lr must be positive, got {}", self.lr));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                problems.push(format!("{name} must be in (0, 1), got {b}"));
            }
        }
        if !(self.eps > 0.0) {
            problems.push(format!("eps must be positive, got {}", self.eps));
        }
        if !(self.weight_decay >= 0.0) {
            problems.push(format!(
                "weight_decay must be non-negative, got {}",
                self.weight_decay
            ));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}

/// First and second moment estimates, keyed by parameter name.
#[derive(Clone, Debug, Default)]
pub struct AdamState {
    m: HashMap<String, Vec<f64>>,
    v: HashMap<String, Vec<f64>>,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn first_moment(&self, name: &str) -> Option<&[f64]> {
        self.m.get(name).map(Vec::as_slice)
    }

    pub fn second_moment(&self, name: &str) -> Option<&[f64]> {
        self.v.get(name).map(Vec::as_slice)
    }
}

/// One update at step `t ≥ 1` for every parameter that has an entry in `grads`;
/// parameters without one are left alone (frozen).
///
/// `lr_scale(name)` multiplies the base learning rate (schedule × plan
/// multiplier). Returns the effective learning rate used per parameter. All
/// gradients are checked for finiteness before anything is modified.
pub fn adam_step(
    params: &mut Params,
    grads: &IndexMap<String, Tensor>,
    state: &mut AdamState,
    config: &AdamConfig,
    t: u64,
    lr_scale: impl Fn(&str) -> f64,
) -> Result<IndexMap<String, f64>> {
    if t == 0 {
        return Err(Error::invalid("adam step index starts at 1"));
    }
    for (name, g) in grads {
        let p = params
            .get(name)
            .ok_or_else(|| Error::invalid(format!("gradient for unknown parameter `{name}`")))?;
        if p.shape() != g.shape() {
            return Err(Error::shape("adam_step", p.shape(), g.shape()));
        }
        if !g.all_finite() {
            return Err(Error::NonFiniteGradient { name: name.clone() });
        }
    }
    let (c1, c2) = if config.bias_correction {
        let t = i32::try_from(t).unwrap_or(i32::MAX);
        (1.0 - config.beta1.powi(t), 1.0 - config.beta2.powi(t))
    } else {
        (1.0, 1.0)
    };
    let (b1, b2) = (config.beta1, config.beta2);
    let mut used = IndexMap::with_capacity(grads.len());
    for (name, g) in grads {
        let lr = config.lr * lr_scale(name);
        used.insert(name.clone(), lr);
        let p = params.get_mut(name).expect("checked above").data_mut();
        let n = p.len();
        let m = state.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
        let v = state.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
        for (((theta, &gi), mi), vi) in p.iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = b1 * *mi + (1.0 - b1) * gi;
            *vi = b2 * *vi + (1.0 - b2) * gi * gi;
            let m_hat = *mi / c1;
            let v_hat = *vi / c2;
            *theta -= lr * (m_hat / (v_hat.sqrt() + config.eps) + config.weight_decay * *theta);
        }
    }
    Ok(used)
}

/// Linear warmup for the first `warmup` steps, then linear decay that would
/// reach zero one step after `total`. `t` counts from 1.
pub fn linear_schedule(t: u64, total: u64, warmup: u64) -> f64 {
    if warmup > 0 && t <= warmup {
        t as f64 / warmup as f64
    } else if t > total {
        0.0
    } else {
        (total - t + 1) as f64 / (total - warmup) as f64
    }
}

/// Warmup length for a fraction of `total` steps (rounded down).
pub fn warmup_steps(total: u64, fraction: f64) -> u64 {
    ((total as f64 * fraction).floor() as u64).min(total.saturating_sub(1))
}
