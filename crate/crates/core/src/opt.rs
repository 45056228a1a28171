//! Adam optimizer over named parameters.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::tensor::{ParameterStore, StoreError};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 0.001, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moment state is kept only for parameters that have
/// actually received a gradient; frozen parameters never get state and are
/// never touched.
pub struct Adam {
    cfg: AdamConfig,
    step_count: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Self { cfg, step_count: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn has_state_for(&self, name: &str) -> bool {
        self.m.contains_key(name)
    }

    /// Applies one update from summed (already averaged) gradients.
    pub fn step(
        &mut self,
        store: &mut ParameterStore,
        grads: &BTreeMap<String, Vec<f64>>,
    ) -> Result<(), StoreError> {
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.cfg.beta1.powi(t);
        let bc2 = 1.0 - self.cfg.beta2.powi(t);
        for (name, g) in grads {
            if store.is_frozen(name)? {
                continue;
            }
            let param = store.get_mut(name)?;
            if param.len() != g.len() {
                return Err(StoreError::GradShape {
                    name: name.clone(),
                    got: vec![g.len()],
                    want: param.shape().to_vec(),
                });
            }
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let data = param.data_mut();
            for i in 0..g.len() {
                m[i] = self.cfg.beta1 * m[i] + (1.0 - self.cfg.beta1) * g[i];
                v[i] = self.cfg.beta2 * v[i] + (1.0 - self.cfg.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                data[i] -= self.cfg.lr * mhat / (vhat.sqrt() + self.cfg.eps);
            }
        }
        Ok(())
    }
}
