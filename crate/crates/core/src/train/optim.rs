use crate::error::{Error, Result};
use crate::grad_core::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected adaptive-moment state for one parameter store.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        Self {
            config,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update from the gradients held in `store`.
    pub fn optimizer_step(&mut self, store: &mut ParamStore) -> Result<()> {
        if let Some(t) = store.tensors().iter().find(|t| t.grad.iter().any(|g| !g.is_finite())) {
            return Err(Error::NonFiniteGradient(t.name.clone()));
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for ((t, m), v) in store.tensors_mut().iter_mut().zip(&mut self.first).zip(&mut self.second) {
            for k in 0..t.data.len() {
                let g = t.grad[k];
                m[k] = beta1 * m[k] + (1.0 - beta1) * g;
                v[k] = beta2 * v[k] + (1.0 - beta2) * g * g;
                let mhat = m[k] / c1;
                let vhat = v[k] / c2;
                t.data[k] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
