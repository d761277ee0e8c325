//! AdamW with decoupled weight decay.

use std::collections::BTreeMap;

use ecgqa_autodiff::{ParameterSet, Tensor};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

/// Moments keyed by parameter path, plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    pub step: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

impl OptimizerState {
    pub fn new(config: AdamWConfig, params: &ParameterSet) -> Self {
        let zeros: BTreeMap<String, Tensor> = params
            .iter()
            .filter(|(_, p)| !p.frozen)
            .map(|(k, p)| (k.clone(), Tensor::zeros(p.value.shape())))
            .collect();
        Self { config, step: 0, m: zeros.clone(), v: zeros }
    }

    /// One update of every trainable entry. Each must have a gradient.
    pub fn update(&mut self, params: &mut ParameterSet, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        let c = self.config;
        self.step += 1;
        let t = self.step as i32;
        let (bc1, bc2) = (1.0 - c.beta1.powi(t), 1.0 - c.beta2.powi(t));
        for path in params.trainable_paths() {
            let g = grads.get(&path).ok_or_else(|| Error::Config(format!("no gradient for {path}")))?;
            let p = params.tensor(&path)?.clone();
            let m = self.m.get_mut(&path).ok_or_else(|| Error::Config(format!("no moments for {path}")))?;
            let v = self.v.get_mut(&path).expect("moments are created together");
            if g.shape() != p.shape() {
                return Err(Error::Config(format!("gradient shape mismatch for {path}")));
            }
            let mut next = p.clone();
            for i in 0..p.numel() {
                let gi = g.data()[i];
                let mi = c.beta1 * m.data()[i] + (1.0 - c.beta1) * gi;
                let vi = c.beta2 * v.data()[i] + (1.0 - c.beta2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let step = (mi / bc1) / ((vi / bc2).sqrt() + c.eps);
                let pi = p.data()[i];
                next.data_mut()[i] = pi - c.lr * (step + c.weight_decay * pi);
            }
            if !next.is_finite() {
                return Err(Error::Config(format!("non-finite update for {path}")));
            }
            params.set(&path, next)?;
        }
        Ok(())
    }

    /// Moments as frozen entries under `opt.m/` and `opt.v/`.
    pub fn to_parameter_set(&self) -> Result<ParameterSet> {
        let mut ps = ParameterSet::new();
        for (k, t) in &self.m {
            ps.insert(format!("opt.m/{k}"), t.clone(), true)?;
        }
        for (k, t) in &self.v {
            ps.insert(format!("opt.v/{k}"), t.clone(), true)?;
        }
        Ok(ps)
    }

    pub fn from_parameter_set(config: AdamWConfig, step: u64, ps: &ParameterSet) -> Self {
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for (k, p) in ps.iter() {
            if let Some(path) = k.strip_prefix("opt.m/") {
                m.insert(path.to_string(), (*p.value).clone());
            } else if let Some(path) = k.strip_prefix("opt.v/") {
                v.insert(path.to_string(), (*p.value).clone());
            }
        }
        Self { config, step, m, v }
    }
}
