//! Adam with L2 weight decay added to the gradient.

use std::collections::BTreeMap;

use ndarray::{ArrayD, Zip};

use crate::error::{Error, Result};
use crate::state::{is_buffer, Grads, ModelState};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

#[derive(Debug, Clone)]
struct Moments {
    m: ArrayD<f64>,
    v: ArrayD<f64>,
    step: u64,
}

/// Per-tensor Adam state keyed by parameter name.
#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    moments: BTreeMap<String, Moments>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Self { cfg, moments: BTreeMap::new() }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.cfg
    }

    /// Drops all moment estimates.
    pub fn reset(&mut self) {
        self.moments.clear();
    }

    /// Drops the moments of parameters whose name starts with `prefix`.
    pub fn reset_prefix(&mut self, prefix: &str) {
        self.moments.retain(|name, _| !name.starts_with(prefix));
    }

    /// Updates every trainable tensor of `state` that has a gradient.
    ///
    /// Tensors without a gradient are left alone and keep their moments.
    pub fn step(&mut self, state: &mut ModelState, grads: &Grads, lr: f64) -> Result<()> {
        let AdamConfig { beta1, beta2, eps, weight_decay } = self.cfg;
        for (name, g) in grads.iter() {
            if is_buffer(name) {
                continue;
            }
            let param = state.get_mut(name)?;
            if param.shape() != g.shape() {
                return Err(Error::State(format!(
                    "gradient for {name} has shape {:?}, parameter has {:?}",
                    g.shape(),
                    param.shape()
                )));
            }
            let slot = self.moments.entry(name.to_string()).or_insert_with(|| Moments {
                m: ArrayD::zeros(param.raw_dim()),
                v: ArrayD::zeros(param.raw_dim()),
                step: 0,
            });
            slot.step += 1;
            let bc1 = 1.0 - beta1.powi(slot.step as i32);
            let bc2 = 1.0 - beta2.powi(slot.step as i32);
            Zip::from(&mut *param).and(&mut slot.m).and(&mut slot.v).and(g).for_each(|p, m, v, &g| {
                let g = g + weight_decay * *p;
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            });
        }
        Ok(())
    }
}
