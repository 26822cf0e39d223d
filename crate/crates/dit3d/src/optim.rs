//! Adam optimizer over named parameter tensors.
//!
//! Moment buffers are keyed by parameter name and created lazily, so one
//! optimizer can follow a store through trainable-set changes. Frozen
//! tensors are never written, even when a gradient is supplied for them.

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Real;
use indexmap::IndexMap;

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

pub struct Adam<F> {
    pub cfg: AdamConfig,
    step_count: u64,
    moments: IndexMap<String, (Vec<F>, Vec<F>)>,
}

impl<F: Real> Adam<F> {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam {
            cfg,
            step_count: 0,
            moments: IndexMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step_count
    }

    /// Applies one update from named gradients. Unknown names are contract
    /// errors, length mismatches dimension errors; gradients aimed at
    /// frozen tensors are ignored without touching the tensor.
    pub fn step(&mut self, store: &mut ParamStore<F>, grads: &[(String, Vec<F>)]) -> Result<()> {
        self.step_count += 1;
        let t = self.step_count as i32;
        let bias1 = 1.0 - self.cfg.beta1.powi(t);
        let bias2 = 1.0 - self.cfg.beta2.powi(t);
        let b1 = F::from_f64(self.cfg.beta1);
        let b2 = F::from_f64(self.cfg.beta2);
        let one_minus_b1 = F::from_f64(1.0 - self.cfg.beta1);
        let one_minus_b2 = F::from_f64(1.0 - self.cfg.beta2);
        let lr = F::from_f64(self.cfg.lr);
        let eps = F::from_f64(self.cfg.eps);
        let inv_bias1 = F::from_f64(1.0 / bias1);
        let inv_bias2 = F::from_f64(1.0 / bias2);
        for (name, grad) in grads {
            let tensor = store.get_mut(name).ok_or_else(|| {
                Error::Contract(format!("gradient for unknown parameter '{name}'"))
            })?;
            if !tensor.trainable {
                continue;
            }
            if grad.len() != tensor.data.len() {
                return Err(Error::Dim(format!(
                    "gradient for '{name}' has {} entries, parameter has {}",
                    grad.len(),
                    tensor.data.len()
                )));
            }
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![F::ZERO; grad.len()], vec![F::ZERO; grad.len()]));
            if m.len() != grad.len() {
                return Err(Error::Dim(format!(
                    "moment buffer for '{name}' has {} entries, gradient has {}",
                    m.len(),
                    grad.len()
                )));
            }
            for i in 0..grad.len() {
                let g = grad[i];
                m[i] = b1 * m[i] + one_minus_b1 * g;
                v[i] = b2 * v[i] + one_minus_b2 * g * g;
                let m_hat = m[i] * inv_bias1;
                let v_hat = v[i] * inv_bias2;
                tensor.data[i] = tensor.data[i] - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
