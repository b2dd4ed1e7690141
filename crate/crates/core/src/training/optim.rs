use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::OptimizerSnapshot;
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_steps: u64,
    /// 0 means "epochs x batches per epoch", filled in by the training loop.
    pub total_steps: u64,
    /// Global gradient-norm cap; 0 disables clipping.
    pub clip_norm: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            warmup_steps: 0,
            total_steps: 0,
            clip_norm: 5.0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return fail(format!("betas must lie in [0, 1), got {} and {}", self.beta1, self.beta2));
        }
        if self.lr < 0.0 || self.eps <= 0.0 || self.weight_decay < 0.0 || self.clip_norm < 0.0 {
            return fail("lr, weight_decay and clip_norm must be >= 0 and eps > 0".into());
        }
        if self.total_steps > 0 && self.warmup_steps > self.total_steps {
            return fail(format!(
                "warmup_steps {} exceeds total_steps {}",
                self.warmup_steps, self.total_steps
            ));
        }
        Ok(())
    }
}

/// Linear warmup from 0 to `lr`, then cosine decay to 0 at `total_steps`.
pub fn lr_at(step: u64, cfg: &OptimizerConfig) -> f64 {
    let (w, total) = (cfg.warmup_steps, cfg.total_steps);
    if step < w {
        return cfg.lr * step as f64 / w as f64;
    }
    if total <= w {
        return cfg.lr;
    }
    let progress = ((step - w) as f64 / (total - w) as f64).min(1.0);
    cfg.lr * 0.5 * (1.0 + (PI * progress).cos())
}

/// AdamW with decoupled weight decay. Moments are kept per trainable
/// tensor in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    cfg: OptimizerConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl AdamW {
    pub fn new(cfg: OptimizerConfig, store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store
            .trainable_ids()
            .iter()
            .map(|&id| Tensor::zeros(store.get(id).shape()))
            .collect();
        Self {
            cfg,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.cfg
    }

    /// Steps taken so far.
    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn snapshot(&self) -> OptimizerSnapshot {
        OptimizerSnapshot {
            step: self.t,
            m: self.m.clone(),
            v: self.v.clone(),
        }
    }

    pub fn restore(cfg: OptimizerConfig, store: &ParamStore, snap: OptimizerSnapshot) -> Result<Self> {
        let mut opt = Self::new(cfg, store);
        let same = |a: &[Tensor], b: &[Tensor]| a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.shape() == y.shape());
        if !same(&opt.m, &snap.m) || !same(&opt.v, &snap.v) {
            return Err(Error::State("optimizer snapshot does not match the model".into()));
        }
        opt.m = snap.m;
        opt.v = snap.v;
        opt.t = snap.step;
        Ok(opt)
    }

    /// One update with learning rate `lr`. `grads` holds one tensor per
    /// trainable parameter, in store order.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor], lr: f64) -> Result<()> {
        let ids = store.trainable_ids();
        if grads.len() != ids.len() || self.m.len() != ids.len() {
            return Err(Error::State(format!(
                "{} gradients and {} moment slots for {} trainable tensors",
                grads.len(),
                self.m.len(),
                ids.len()
            )));
        }
        for ((&id, g), m) in ids.iter().zip(grads).zip(&self.m) {
            if g.shape() != store.get(id).shape() || m.shape() != g.shape() {
                return Err(Error::State(format!(
                    "gradient shape {:?} does not match `{}` {:?}",
                    g.shape(),
                    store.name(id),
                    store.get(id).shape()
                )));
            }
        }
        self.t += 1;
        let c = &self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for (k, &id) in ids.iter().enumerate() {
            let p = store.get_mut(id).data_mut();
            let g = grads[k].data();
            let m = self.m[k].data_mut();
            let v = self.v[k].data_mut();
            for i in 0..p.len() {
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= lr * (m_hat / (v_hat.sqrt() + c.eps) + c.weight_decay * p[i]);
            }
        }
        Ok(())
    }
}

/// Scales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().for_each(|g| g.data_mut().iter_mut().for_each(|v| *v *= s));
    }
    norm
}
