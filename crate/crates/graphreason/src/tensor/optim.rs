//! Momentum SGD with coupled weight decay.
//!
//! Update per coordinate: `v = momentum * v + (g + weight_decay * p)` then
//! `p = p - lr * v`. The learning rate optionally drops once by a fixed
//! factor at a chosen step. Stepping consumes the gradients in the
//! [`ParamSet`]; a missing gradient is an error so a forgotten backward (or
//! a parameter created but never wired into the graph) surfaces loudly.

use serde::{Deserialize, Serialize};

use super::params::{ParamId, ParamSet};
use super::TensorError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Step index at which `lr` is multiplied once by `lr_decay_factor`.
    pub lr_decay_step: Option<usize>,
    pub lr_decay_factor: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            lr: 0.005,
            momentum: 0.9,
            weight_decay: 1e-4,
            lr_decay_step: None,
            lr_decay_factor: 0.1,
        }
    }
}

pub struct Sgd {
    cfg: SgdConfig,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(cfg: SgdConfig, params: &ParamSet) -> Self {
        let velocity = params
            .ids()
            .map(|id| vec![0.0; params.data(id).len()])
            .collect();
        Sgd { cfg, velocity }
    }

    pub fn config(&self) -> &SgdConfig {
        &self.cfg
    }

    /// Effective learning rate at `step` (0-based).
    pub fn lr_at(&self, step: usize) -> f64 {
        match self.cfg.lr_decay_step {
            Some(d) if step >= d => self.cfg.lr * self.cfg.lr_decay_factor,
            _ => self.cfg.lr,
        }
    }

    /// Apply one update using the gradients accumulated in `params`,
    /// consuming them.
    pub fn step(&mut self, params: &mut ParamSet, step: usize) -> Result<(), TensorError> {
        let lr = self.lr_at(step);
        let ids: Vec<ParamId> = params.ids().collect();
        for id in ids {
            let g = params
                .take_grad(id)
                .ok_or_else(|| TensorError::MissingGradient(params.name(id).to_string()))?;
            let v = &mut self.velocity[id.0];
            let mut data = params.data(id).to_vec();
            for i in 0..data.len() {
                v[i] = self.cfg.momentum * v[i] + (g[i] + self.cfg.weight_decay * data[i]);
                data[i] -= lr * v[i];
            }
            params.set_data(id, data)?;
        }
        Ok(())
    }

    pub fn velocity(&self) -> &[Vec<f64>] {
        &self.velocity
    }

    pub fn set_velocity(&mut self, v: Vec<Vec<f64>>) -> Result<(), TensorError> {
        if v.len() != self.velocity.len()
            || v.iter()
                .zip(self.velocity.iter())
                .any(|(a, b)| a.len() != b.len())
        {
            return Err(TensorError::Invalid {
                op: "set_velocity",
                msg: "velocity layout does not match parameter set".into(),
            });
        }
        self.velocity = v;
        Ok(())
    }
}
