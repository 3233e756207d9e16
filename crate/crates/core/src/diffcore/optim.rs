//! Adaptive moment estimation (Adam) with bias correction.

use thiserror::Error;

use super::params::ParameterStore;

#[derive(Debug, Error, PartialEq)]
pub enum OptimError {
    #[error("non-finite gradient in parameter {name} at index {index} (value {value})")]
    NonFinite {
        name: String,
        index: usize,
        value: f64,
    },
    #[error("gradient list has {got} entries for {expected} parameters")]
    Arity { expected: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Per-parameter first and second moments, aligned with a [`ParameterStore`].
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParameterStore, config: AdamConfig) -> Self {
        let zeros = || store.iter().map(|(_, p)| vec![0.0; p.value.len()]).collect();
        Adam {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Apply one update. `grads[i]` belongs to the i-th parameter; `None`
    /// is treated as a zero gradient. Nothing is modified when any gradient
    /// is non-finite.
    pub fn step(&mut self, store: &mut ParameterStore, grads: &[Option<Vec<f64>>]) -> Result<(), OptimError> {
        if grads.len() != store.len() {
            return Err(OptimError::Arity {
                expected: store.len(),
                got: grads.len(),
            });
        }
        for ((_, p), g) in store.iter().zip(grads) {
            if let Some(g) = g {
                if let Some((index, &value)) = g.iter().enumerate().find(|(_, x)| !x.is_finite()) {
                    return Err(OptimError::NonFinite {
                        name: p.name.clone(),
                        index,
                        value,
                    });
                }
            }
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
        for (k, id) in ids.into_iter().enumerate() {
            let param = store.get_mut(id);
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            match &grads[k] {
                Some(g) => {
                    for i in 0..g.len() {
                        m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                        v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                        param.value[i] -= lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + eps);
                    }
                }
                None => {
                    for i in 0..m.len() {
                        m[i] *= beta1;
                        v[i] *= beta2;
                        param.value[i] -= lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}
