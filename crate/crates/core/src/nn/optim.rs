use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::network::{Gradients, Network};

/// Step decay: `initial · factor^floor(epoch / period)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub initial: f64,
    pub factor: f64,
    pub period: usize,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            initial: 0.1,
            factor: 0.2,
            period: 55,
        }
    }
}

impl LrSchedule {
    pub fn at(&self, epoch: usize) -> f64 {
        self.initial * self.factor.powi((epoch / self.period.max(1)) as i32)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub schedule: LrSchedule,
    pub momentum: f64,
    pub weight_decay: f64,
    pub nesterov: bool,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            schedule: LrSchedule::default(),
            momentum: 0.9,
            weight_decay: 1e-4,
            nesterov: true,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        let s = &self.schedule;
        if !(s.initial > 0.0 && s.initial.is_finite()) {
            return Err(Error::arg(format!("learning rate must be positive, got {}", s.initial)));
        }
        if !(s.factor > 0.0 && s.factor <= 1.0) || s.period == 0 {
            return Err(Error::arg("decay factor must be in (0, 1] with a positive period"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::arg(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::arg("weight decay must be non-negative"));
        }
        Ok(())
    }
}

/// Optimizer configuration plus one velocity buffer per parameter name.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: SgdConfig,
    pub velocity: BTreeMap<String, Vec<f64>>,
}

impl OptimizerState {
    pub fn new(config: SgdConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            velocity: BTreeMap::new(),
        })
    }

    /// Updates one parameter in place.
    pub fn step_param(&mut self, name: &str, param: &mut [f64], grad: &[f64], lr: f64) -> Result<()> {
        if param.len() != grad.len() {
            return Err(Error::shape(format!(
                "`{name}`: {} parameters, {} gradient entries",
                param.len(),
                grad.len()
            )));
        }
        let SgdConfig {
            momentum: mu,
            weight_decay: wd,
            nesterov,
            ..
        } = self.config;
        let v = self.velocity.entry(name.to_string()).or_insert_with(|| vec![0.0; param.len()]);
        for ((p, &g0), v) in param.iter_mut().zip(grad).zip(v.iter_mut()) {
            let g = g0 + wd * *p;
            *v = mu * *v + g;
            *p -= lr * if nesterov { g + mu * *v } else { *v };
        }
        Ok(())
    }
}

/// Applies every gradient in `grads.params` to `net` at the learning rate for `epoch`.
/// Parameters absent from `grads` are left untouched, velocities included.
pub fn sgd_step(net: &mut Network, grads: &Gradients, state: &mut OptimizerState, epoch: usize) -> Result<()> {
    let lr = state.config.schedule.at(epoch);
    let mut seen = 0;
    for (name, param) in net.params_mut() {
        if let Some(g) = grads.params.get(&name) {
            state.step_param(&name, param, g, lr)?;
            seen += 1;
        }
    }
    if seen != grads.params.len() {
        let unknown = grads
            .params
            .keys()
            .find(|k| net.param_names().iter().all(|n| n != *k))
            .cloned()
            .unwrap_or_default();
        return Err(Error::arg(format!("gradient for unknown parameter `{unknown}`")));
    }
    Ok(())
}
