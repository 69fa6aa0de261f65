//! AdamW, warmup-cosine learning-rate schedule and parameter EMA.

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{arg_err, dim_err, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamWConfig {
    /// Betas used for the velocity network.
    pub fn flow() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            weight_decay: 1e-3,
        }
    }

    /// Betas used for the compressor.
    pub fn vae() -> Self {
        Self {
            beta1: 0.99,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState {
    pub config: AdamWConfig,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    /// Per-parameter flag: apply decoupled weight decay.
    pub decay: Vec<bool>,
}

impl AdamWState {
    pub fn new(config: AdamWConfig, params: &[&Tensor]) -> Self {
        Self {
            config,
            step: 0,
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            decay: vec![true; params.len()],
        }
    }

    pub fn with_decay_mask(mut self, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != self.m.len() {
            return dim_err("decay mask length");
        }
        self.decay = mask;
        Ok(self)
    }
}

/// One bias-corrected AdamW update with decoupled weight decay, in place.
pub fn adamw_step(
    params: &mut [&mut Tensor],
    grads: &[Tensor],
    state: &mut AdamWState,
    lr: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return dim_err(format!(
            "{} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        ));
    }
    if !(lr >= 0.0) {
        return arg_err("learning rate must be >= 0");
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        p.same_shape(g)?;
        p.same_shape(&state.m[i])?;
        if !g.is_finite() {
            return Err(Error::NonFinite(format!("gradient of parameter {i}")));
        }
    }
    state.step += 1;
    let c = state.config;
    let t = state.step as i32;
    let bc1 = 1.0 - c.beta1.powi(t);
    let bc2 = 1.0 - c.beta2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let wd = if state.decay[i] { c.weight_decay } else { 0.0 };
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (((pj, &gj), mj), vj) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
            *mj = c.beta1 * *mj + (1.0 - c.beta1) * gj;
            *vj = c.beta2 * *vj + (1.0 - c.beta2) * gj * gj;
            let mhat = *mj / bc1;
            let vhat = *vj / bc2;
            if wd != 0.0 {
                *pj -= lr * wd * *pj;
            }
            *pj -= lr * mhat / (vhat.sqrt() + c.eps);
        }
    }
    Ok(())
}

/// Linear warmup to `peak_lr`, then cosine decay to `floor_fraction * peak_lr`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    #[serde(default = "default_floor")]
    pub floor_fraction: f64,
}

fn default_floor() -> f64 {
    0.2
}

impl LrSchedule {
    pub fn new(peak_lr: f64, warmup_steps: u64, total_steps: u64) -> Self {
        Self {
            peak_lr,
            warmup_steps,
            total_steps,
            floor_fraction: default_floor(),
        }
    }

    /// Steps past `total_steps` clamp to the floor.
    pub fn lr_at_step(&self, step: u64) -> f64 {
        let floor = self.floor_fraction * self.peak_lr;
        if step < self.warmup_steps {
            return self.peak_lr * step as f64 / self.warmup_steps as f64;
        }
        if step >= self.total_steps {
            return if self.total_steps <= self.warmup_steps && step == self.warmup_steps {
                self.peak_lr
            } else {
                floor
            };
        }
        let span = (self.total_steps - self.warmup_steps) as f64;
        let progress = (step - self.warmup_steps) as f64 / span;
        floor + (self.peak_lr - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

pub fn lr_at_step(s: &LrSchedule, step: u64) -> f64 {
    s.lr_at_step(step)
}

/// Exponential moving average of a parameter list.
#[derive(Debug, Clone, PartialEq)]
pub struct EmaState {
    pub decay: f64,
    pub shadow: Vec<Tensor>,
}

impl EmaState {
    pub fn new(decay: f64, params: &[&Tensor]) -> Self {
        Self {
            decay,
            shadow: params.iter().map(|p| (*p).clone()).collect(),
        }
    }

    /// `shadow <- decay * shadow + (1 - decay) * params`
    pub fn update(&mut self, params: &[&Tensor]) -> Result<()> {
        if params.len() != self.shadow.len() {
            return dim_err("ema parameter count");
        }
        let d = self.decay;
        for (s, p) in self.shadow.iter_mut().zip(params) {
            s.same_shape(p)?;
            for (a, &b) in s.data_mut().iter_mut().zip(p.data()) {
                *a = d * *a + (1.0 - d) * b;
            }
        }
        Ok(())
    }
}

pub fn ema_update(mut e: EmaState, params: &[&Tensor]) -> Result<EmaState> {
    e.update(params)?;
    Ok(e)
}
