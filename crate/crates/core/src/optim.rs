//! AdamW with decoupled weight decay.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            weight_decay: 0.7,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.weight_decay >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if !ok {
            return Err(Error::Config(format!("invalid optimizer settings {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Per-parameter moment buffers and the shared step count.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    state: BTreeMap<String, Moments>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            state: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update. `grads` must hold a buffer for every parameter in `params`.
    ///
    /// Decay is applied first, `w ← w − lr·wd·w`, then the bias-corrected
    /// Adam delta `lr · m̂ / (√v̂ + ε)` is subtracted.
    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Vec<f32>>) -> Result<()> {
        for (path, p) in params.iter() {
            match grads.get(path) {
                Some(g) if g.len() == p.values.len() => {}
                Some(g) => {
                    return Err(Error::Argument(format!(
                        "gradient for {path} has {} entries, parameter has {}",
                        g.len(),
                        p.values.len()
                    )))
                }
                None => return Err(Error::MissingGrad(path.clone())),
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let decay = 1.0 - c.lr * c.weight_decay;
        for (path, p) in params.iter_mut() {
            let g = &grads[path];
            let st = self.state.entry(path.clone()).or_insert_with(|| Moments {
                m: vec![0.0; g.len()],
                v: vec![0.0; g.len()],
            });
            for i in 0..g.len() {
                let gi = g[i] as f64;
                st.m[i] = c.beta1 * st.m[i] + (1.0 - c.beta1) * gi;
                st.v[i] = c.beta2 * st.v[i] + (1.0 - c.beta2) * gi * gi;
                let m_hat = st.m[i] / bc1;
                let v_hat = st.v[i] / bc2;
                let w = p.values[i] as f64 * decay;
                p.values[i] = (w - c.lr * m_hat / (v_hat.sqrt() + c.eps)) as f32;
            }
        }
        Ok(())
    }
}
