use std::collections::BTreeMap;

use crate::nn::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moments are keyed by parameter path.
#[derive(Clone, Debug)]
pub struct Adam {
    pub cfg: AdamConfig,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
    t: i32,
}

/// Scales `grads` in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Vec<f64>>, max_norm: f64) -> f64 {
    let norm = grads.values().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        grads.values_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam {
            cfg,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            t: 0,
        }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    /// One update of every parameter. Parameters absent from `grads` are
    /// treated as having zero gradient.
    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Vec<f64>>, lr: f64) {
        self.t += 1;
        let AdamConfig { beta1, beta2, eps } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.t);
        let c2 = 1.0 - beta2.powi(self.t);
        for (path, p) in store.params_mut() {
            let n = p.numel();
            let m = self.m.entry(path.to_string()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(path.to_string()).or_insert_with(|| vec![0.0; n]);
            let g = grads.get(path);
            for (i, w) in p.data_mut().iter_mut().enumerate() {
                let gi = g.map_or(0.0, |g| g[i]);
                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}
