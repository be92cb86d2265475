use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::numeric::ParamStore;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr_backbone: f64,
    pub lr_head: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr_backbone: 1e-6,
            lr_head: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Adam with decoupled weight decay. Encoder-group parameters use
/// `lr_backbone`, everything else `lr_head`; frozen groups are skipped
/// entirely, including their moments.
#[derive(Clone, Debug)]
pub struct AdamW {
    config: AdamWConfig,
    t: i32,
    moments: HashMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> AdamW {
        AdamW {
            config,
            t: 0,
            moments: HashMap::new(),
        }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    /// Applies one update from the gradients currently held in `params`.
    pub fn step(&mut self, params: &mut ParamStore) -> Result<()> {
        for (name, e) in params.iter() {
            if params.is_frozen(e.group) {
                continue;
            }
            if let Some(bad) = e.grad.data().iter().find(|g| !g.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite gradient {bad} in parameter {name:?} at step {}",
                    self.t + 1
                )));
            }
        }

        self.t += 1;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
            ..
        } = self.config;
        let c1 = 1.0 - beta1.powi(self.t);
        let c2 = 1.0 - beta2.powi(self.t);
        let frozen: Vec<_> = params.frozen_groups().collect();
        for (name, e) in params.iter_mut() {
            if frozen.contains(&e.group) {
                continue;
            }
            let lr = if e.group.is_backbone() {
                self.config.lr_backbone
            } else {
                self.config.lr_head
            };
            let n = e.value.len();
            let (m, v) = self
                .moments
                .entry(name.to_owned())
                .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            let grads = e.grad.data();
            for (i, theta) in e.value.data_mut().iter_mut().enumerate() {
                let g = grads[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                *theta -= lr * weight_decay * *theta;
                *theta -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
