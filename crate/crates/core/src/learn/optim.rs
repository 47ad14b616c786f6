use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tape::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
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

/// Adam with bias correction. Frozen tensors are skipped entirely, moments
/// included.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        let shapes = |s: &ParamStore| {
            (0..s.len())
                .map(|i| {
                    let (r, c) = s.value(i).shape();
                    Tensor::zeros(r, c)
                })
                .collect::<Vec<_>>()
        };
        Adam {
            config,
            step: 0,
            m: shapes(store),
            v: shapes(store),
        }
    }

    /// Applies one update from the gradients currently held in `store`.
    pub fn update(&mut self, store: &mut ParamStore) {
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for id in 0..store.len() {
            if store.is_frozen(id) {
                continue;
            }
            let g = store.grad(id).data.clone();
            let (m, v) = (&mut self.m[id].data, &mut self.v[id].data);
            let w = &mut store.value_mut(id).data;
            for k in 0..g.len() {
                m[k] = beta1 * m[k] + (1.0 - beta1) * g[k];
                v[k] = beta2 * v[k] + (1.0 - beta2) * g[k] * g[k];
                let mh = m[k] / c1;
                let vh = v[k] / c2;
                w[k] -= lr * mh / (vh.sqrt() + eps);
            }
        }
    }
}
