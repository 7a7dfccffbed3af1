//! AdamW with decoupled weight decay and a warmup-then-cosine schedule.

use indexmap::IndexMap;

use crate::encoder::ParamSet;
use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerConfig {
    pub base_lr: f64,
    pub min_lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub warmup_epochs: usize,
    pub epochs: usize,
}

impl OptimizerConfig {
    pub fn new(base_lr: f64, min_lr: f64, weight_decay: f64, warmup_epochs: usize, epochs: usize) -> Self {
        OptimizerConfig { base_lr, min_lr, weight_decay, beta1: 0.9, beta2: 0.999, eps: 1e-8, warmup_epochs, epochs }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0) || !(self.min_lr >= 0.0) || self.min_lr > self.base_lr {
            return Err(Error::Config(format!("need 0 <= min_lr <= base_lr, base_lr > 0; got {} / {}", self.min_lr, self.base_lr)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!("weight decay must be non-negative, got {}", self.weight_decay)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::Config("betas must be in [0, 1) and eps positive".into()));
        }
        Ok(())
    }

    /// Linear warmup from 0 to `base_lr`, then cosine decay to `min_lr` at
    /// the final step.
    pub fn lr_at_step(&self, step: usize, steps_per_epoch: usize) -> f64 {
        let warm = self.warmup_epochs * steps_per_epoch;
        let total = self.epochs * steps_per_epoch;
        if step < warm {
            return self.base_lr * step as f64 / warm as f64;
        }
        let progress = if total > warm { ((step - warm) as f64 / (total - warm) as f64).min(1.0) } else { 1.0 };
        self.min_lr + 0.5 * (self.base_lr - self.min_lr) * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// First and second moments per parameter, plus the shared step count.
#[derive(Debug, Clone, Default)]
pub struct OptimizerState {
    pub step: u64,
    moments: IndexMap<String, (Vec<f64>, Vec<f64>)>,
}

impl OptimizerState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// One AdamW update of every parameter present in `grads`. Non-finite
/// gradients abort before anything is modified.
pub fn adamw_step<F: Float>(
    params: &mut ParamSet<F>,
    grads: &IndexMap<String, Tensor<F>>,
    state: &mut OptimizerState,
    cfg: &OptimizerConfig,
    lr: f64,
) -> Result<()> {
    for (name, g) in grads {
        if let Some(bad) = g.data().iter().find(|x| !x.is_finite()) {
            return Err(Error::Numeric(format!("gradient of `{name}` contains {}", bad.to_f64())));
        }
        let p = params.get(name)?;
        if p.shape() != g.shape() {
            return Err(Error::Shape(format!("gradient of `{name}` is {:?}, parameter is {:?}", g.shape(), p.shape())));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let decay = 1.0 - lr * cfg.weight_decay;
    for (name, g) in grads {
        let p = params.get_mut(name)?;
        let (m, v) = state.moments.entry(name.clone()).or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
        for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            let gi = gi.to_f64();
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
            let upd = (*mi / bc1) / ((*vi / bc2).sqrt() + cfg.eps);
            *w = F::from_f64(w.to_f64() * decay - lr * upd);
        }
    }
    Ok(())
}
