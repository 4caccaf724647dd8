//! AdamW with decoupled weight decay and a linear warm-up schedule.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::{ParamStore, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub warmup_steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self { lr: 2e-4, warmup_steps: 1000, beta1: 0.5, beta2: 0.99, eps: 1e-8, weight_decay: 0.0, grad_clip: 0.0 }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0
            && self.grad_clip >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings: {self:?}")))
        }
    }

    /// Learning rate for zero-based `step`: linear ramp to `lr` over the warm-up, then constant.
    pub fn lr_at(&self, step: usize) -> f64 {
        if self.warmup_steps == 0 {
            return self.lr;
        }
        self.lr * ((step + 1) as f64 / self.warmup_steps as f64).min(1.0)
    }
}

pub struct AdamW<R> {
    pub cfg: OptimConfig,
    pub step: usize,
    pub m: ParamStore<R>,
    pub v: ParamStore<R>,
}

impl<R: Real> AdamW<R> {
    pub fn new(cfg: OptimConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg, step: 0, m: ParamStore::new(), v: ParamStore::new() })
    }

    /// Applies one update to every parameter that has a gradient.
    pub fn update(&mut self, params: &mut ParamStore<R>, grads: &BTreeMap<String, Tensor<R>>) -> Result<()> {
        let lr = self.cfg.lr_at(self.step);
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);

        let mut clip = 1.0;
        if self.cfg.grad_clip > 0.0 {
            let norm = grads
                .values()
                .flat_map(|g| g.data().iter())
                .map(|v| v.to_f64() * v.to_f64())
                .sum::<f64>()
                .sqrt();
            if norm > self.cfg.grad_clip {
                clip = self.cfg.grad_clip / norm;
            }
        }

        let (rb1, rb2) = (R::from_f64(b1), R::from_f64(b2));
        let (ob1, ob2) = (R::from_f64(1.0 - b1), R::from_f64(1.0 - b2));
        let step_size = R::from_f64(lr / bc1);
        let inv_bc2 = R::from_f64(1.0 / bc2);
        let eps = R::from_f64(self.cfg.eps);
        let decay = R::from_f64(1.0 - lr * self.cfg.weight_decay);
        let clip = R::from_f64(clip);

        for (name, g) in grads {
            let Some(p) = params.get_mut(name) else {
                return Err(Error::Contract(format!("gradient for unknown parameter `{name}`")));
            };
            if p.shape() != g.shape() {
                return Err(Error::dim("adamw", format!("`{name}`: {:?} vs {:?}", p.shape(), g.shape())));
            }
            if !self.m.contains(name) {
                self.m.insert(name.clone(), Tensor::zeros(p.shape().to_vec()));
                self.v.insert(name.clone(), Tensor::zeros(p.shape().to_vec()));
            }
            let m = self.m.get_mut(name).expect("inserted").data_mut();
            let v = self.v.get_mut(name).expect("inserted").data_mut();
            for (((pi, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let gi = gi * clip;
                *mi = rb1 * *mi + ob1 * gi;
                *vi = rb2 * *vi + ob2 * gi * gi;
                let denom = (*vi * inv_bc2).sqrt() + eps;
                *pi = *pi * decay - step_size * *mi / denom;
            }
        }
        Ok(())
    }
}
