use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::checkpoint::{Checkpoint, Record};
use crate::model::ParamStore;
use crate::scalar::Scalar;

/// Adam with decoupled weight decay and a linear warmup to a constant rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    /// `None` picks the method's default.
    pub learning_rate: Option<f64>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self { learning_rate: None, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0, warmup_steps: 0 }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(lr) = self.learning_rate {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::config(format!("learning rate {lr} must be positive")));
            }
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("betas must lie in [0, 1)"));
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::config("eps must be positive and weight_decay non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<T> {
    pub config: OptimizerConfig,
    pub lr: f64,
    /// Completed updates.
    pub step: u64,
    m: BTreeMap<String, Vec<T>>,
    v: BTreeMap<String, Vec<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(config: OptimizerConfig, lr: f64) -> Self {
        Self { config, lr, step: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    /// Rate used by update number `step` (1-based).
    pub fn rate_at(&self, step: u64) -> f64 {
        let w = self.config.warmup_steps as u64;
        if w == 0 || step >= w {
            self.lr
        } else {
            self.lr * step as f64 / w as f64
        }
    }

    /// Applies one update to every tensor that has a gradient.
    pub fn update(&mut self, params: &mut ParamStore<T>, grads: &[(String, Vec<T>)]) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let c = &self.config;
        let (b1, b2) = (T::from_f64_lossy(c.beta1), T::from_f64_lossy(c.beta2));
        let bc1 = T::from_f64_lossy(1.0 - c.beta1.powi(t));
        let bc2 = T::from_f64_lossy(1.0 - c.beta2.powi(t));
        let lr = T::from_f64_lossy(self.rate_at(self.step));
        let wd = T::from_f64_lossy(c.weight_decay);
        let eps = T::from_f64_lossy(c.eps);
        let one = T::one();
        for (name, g) in grads {
            let p = params.get_mut(name)?;
            if !p.requires_grad {
                return Err(Error::FreezeViolation(name.clone()));
            }
            if g.len() != p.len() {
                return Err(Error::shape("optimizer", format!("gradient of `{name}`")));
            }
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![T::zero(); g.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![T::zero(); g.len()]);
            for (((w, gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (one - b1) * *gi;
                *vi = b2 * *vi + (one - b2) * *gi * *gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *w = *w - lr * (mhat / (vhat.sqrt() + eps) + wd * *w);
            }
            if !p.is_finite() {
                return Err(Error::NonFinite(format!("parameter `{name}` after update")));
            }
        }
        Ok(())
    }

    pub fn save_into(&self, ck: &mut Checkpoint) {
        ck.push(Record::scalar("adam.step", self.step as f64));
        for (prefix, map) in [("adam.m.", &self.m), ("adam.v.", &self.v)] {
            for (name, data) in map {
                ck.push(Record {
                    name: format!("{prefix}{name}"),
                    dims: vec![data.len()],
                    data: data.iter().map(|x| x.to_f64_lossy()).collect(),
                });
            }
        }
    }

    pub fn load_from(&mut self, ck: &Checkpoint) -> Result<()> {
        self.step = ck.scalar("adam.step").ok_or_else(|| Error::format("checkpoint", "missing adam.step"))? as u64;
        self.m.clear();
        self.v.clear();
        for r in &ck.records {
            let conv = || r.data.iter().map(|x| T::from_f64_lossy(*x)).collect::<Vec<T>>();
            if let Some(n) = r.name.strip_prefix("adam.m.") {
                self.m.insert(n.to_string(), conv());
            } else if let Some(n) = r.name.strip_prefix("adam.v.") {
                self.v.insert(n.to_string(), conv());
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::Tensor;

    #[test]
    fn first_update_on_quadratic() {
        // f(w) = ½·a·w², g = a·w. After one step m̂ = g, v̂ = g², so the move
        // is lr·g/(|g| + eps).
        let mut store = ParamStore::<f64>::new();
        let mut w = Tensor::new(vec![3], vec![2.0, -0.5, 0.0]).unwrap();
        w.requires_grad = true;
        store.insert("w", w);
        let a = 3.0;
        let g: Vec<f64> = store.get("w").unwrap().data().iter().map(|x| a * x).collect();
        let cfg = OptimizerConfig { weight_decay: 0.1, ..OptimizerConfig::default() };
        let lr = 0.01;
        let mut opt = AdamW::new(cfg.clone(), lr);
        opt.update(&mut store, &[("w".into(), g.clone())]).unwrap();
        let got = store.get("w").unwrap().data();
        for (i, w0) in [2.0f64, -0.5, 0.0].iter().enumerate() {
            let want = w0 - lr * (g[i] / (g[i].abs() + cfg.eps) + 0.1 * w0);
            assert!((got[i] - want).abs() <= 1e-12, "{i}: {} vs {want}", got[i]);
        }
    }

    #[test]
    fn warmup_ramps_linearly() {
        let cfg = OptimizerConfig { warmup_steps: 4, ..OptimizerConfig::default() };
        let opt = AdamW::<f64>::new(cfg, 1.0);
        assert_eq!(opt.rate_at(1), 0.25);
        assert_eq!(opt.rate_at(4), 1.0);
        assert_eq!(opt.rate_at(100), 1.0);
    }

    #[test]
    fn frozen_tensor_cannot_be_updated() {
        let mut store = ParamStore::<f64>::new();
        store.insert("w", Tensor::zeros(&[1]));
        let mut opt = AdamW::new(OptimizerConfig::default(), 0.1);
        assert!(matches!(opt.update(&mut store, &[("w".into(), vec![1.0])]), Err(Error::FreezeViolation(_))));
    }
}
