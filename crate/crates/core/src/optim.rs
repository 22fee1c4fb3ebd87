//! Adam with linear warmup and optional linear decay.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::transformer::ParamStore;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub warmup_steps: u64,
    /// Global gradient-norm clip; 0 disables.
    #[serde(default)]
    pub grad_clip: f64,
    /// Step at which the rate reaches zero after a linear decay; 0 keeps it
    /// constant after warmup.
    #[serde(default)]
    pub decay_steps: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
            warmup_steps: 1000,
            grad_clip: 0.0,
            decay_steps: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub config: OptimizerConfig,
    step: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(config: OptimizerConfig) -> Self {
        Self {
            config,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn current_lr(&self) -> f64 {
        let c = &self.config;
        let warm = if c.warmup_steps == 0 {
            1.0
        } else {
            ((self.step + 1) as f64 / c.warmup_steps as f64).min(1.0)
        };
        let decay = if c.decay_steps == 0 {
            1.0
        } else {
            (1.0 - self.step as f64 / c.decay_steps as f64).max(0.0)
        };
        c.lr * warm * decay
    }

    /// One update of every parameter named in `grads`; others are untouched.
    pub fn apply(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        let lr = self.current_lr();
        let c = &self.config;
        let mut clip = 1.0;
        if c.grad_clip > 0.0 {
            let norm = grads
                .values()
                .map(|g| g.data().iter().map(|x| x * x).sum::<f64>())
                .sum::<f64>()
                .sqrt();
            if norm > c.grad_clip {
                clip = c.grad_clip / norm;
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (name, g) in grads {
            let p = store.get_mut(name)?;
            if p.shape() != g.shape() {
                return Err(Error::ShapeMismatch {
                    op: "adam",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            let m = self.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            for i in 0..g.len() {
                let gi = g.data()[i] * clip;
                let mi = c.beta1 * m.data()[i] + (1.0 - c.beta1) * gi;
                let vi = c.beta2 * v.data()[i] + (1.0 - c.beta2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let update = lr * (mi / bc1) / ((vi / bc2).sqrt() + c.eps);
                p.data_mut()[i] -= update;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimizes_quadratic() {
        let mut store = ParamStore::new();
        store.insert("x", Tensor::vector(vec![3.0, -2.0]));
        let mut opt = Adam::new(OptimizerConfig {
            lr: 0.05,
            warmup_steps: 0,
            ..Default::default()
        });
        for _ in 0..2000 {
            let x = store.get("x").unwrap().clone();
            let g: BTreeMap<_, _> = [("x".to_string(), x.scale(2.0))].into();
            opt.apply(&mut store, &g).unwrap();
        }
        assert!(store.get("x").unwrap().max_abs() < 1e-2);
    }

    #[test]
    fn decay_reaches_zero() {
        let mut opt = Adam::new(OptimizerConfig {
            lr: 1.0,
            warmup_steps: 0,
            decay_steps: 4,
            ..Default::default()
        });
        let mut store = ParamStore::new();
        store.insert("x", Tensor::vector(vec![1.0]));
        let g: BTreeMap<_, _> = [("x".to_string(), Tensor::vector(vec![1.0]))].into();
        let mut rates = Vec::new();
        for _ in 0..5 {
            rates.push(opt.current_lr());
            opt.apply(&mut store, &g).unwrap();
        }
        assert_eq!(rates, [1.0, 0.75, 0.5, 0.25, 0.0]);
    }

    #[test]
    fn zero_lr_is_identity() {
        let mut store = ParamStore::new();
        store.insert("x", Tensor::vector(vec![1.5, -0.25]));
        let before = store.get("x").unwrap().clone();
        let mut opt = Adam::new(OptimizerConfig {
            lr: 0.0,
            ..Default::default()
        });
        let g: BTreeMap<_, _> = [("x".to_string(), Tensor::vector(vec![0.3, -7.0]))].into();
        opt.apply(&mut store, &g).unwrap();
        assert!(store.get("x").unwrap().bit_eq(&before));
    }

    #[test]
    fn warmup_ramps_linearly() {
        let opt = Adam::new(OptimizerConfig {
            lr: 1.0,
            warmup_steps: 4,
            ..Default::default()
        });
        assert_eq!(opt.current_lr(), 0.25);
    }
}
