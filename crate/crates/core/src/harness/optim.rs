//! Cosine learning-rate schedule and AdamW with decoupled weight decay.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::net::LayerId;
use crate::tensor::Tensor;

/// `lr_min + ½(lr_start − lr_min)(1 + cos(π·step/total))`.
pub fn cosine_lr(step: usize, total: usize, lr_start: f64, lr_min: f64) -> Result<f64> {
    if total < 1 || step > total {
        return Err(Error::InvalidArgument(format!("step {step} outside 0..={total}")));
    }
    let phase = std::f64::consts::PI * step as f64 / total as f64;
    Ok(lr_min + 0.5 * (lr_start - lr_min) * (1.0 + phase.cos()))
}

/// Weight decay applies to conv weights and low-rank factors, never to bias/gamma/beta.
pub fn decays(name: &str) -> bool {
    if name.ends_with(".lora_a") || name.ends_with(".lora_b") {
        return true;
    }
    name.parse::<LayerId>().map(|id| id.is_conv_weight()).unwrap_or(false)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub betas: [f64; 2],
    pub weight_decay: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            betas: [0.9, 0.9],
            weight_decay: 1e-3,
            eps: 1e-8,
        }
    }
}

/// Moment estimates keyed by parameter name.
#[derive(Clone, Debug, Default)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    pub t: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        AdamW {
            cfg,
            ..Default::default()
        }
    }

    /// One update of every named parameter that has a gradient.
    ///
    /// `p ← p(1 − lr·wd) − lr·m̂/(√v̂ + eps)`, decay only where [`decays`] holds.
    pub fn step(&mut self, params: Vec<(String, &mut Tensor<f32>)>, grads: &BTreeMap<String, Tensor<f32>>, lr: f64) -> Result<()> {
        self.t += 1;
        let [b1, b2] = self.cfg.betas;
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for (name, p) in params {
            let Some(g) = grads.get(&name) else { continue };
            if g.shape() != p.shape() {
                return Err(Error::shape("adamw", format!("{name}: grad {:?} vs param {:?}", g.shape(), p.shape())));
            }
            let n = p.numel();
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let shrink = if decays(&name) { 1.0 - lr * self.cfg.weight_decay } else { 1.0 };
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let gi = f64::from(gi);
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                let update = (*mi / c1) / ((*vi / c2).sqrt() + self.cfg.eps);
                *w = (f64::from(*w) * shrink - lr * update) as f32;
            }
        }
        Ok(())
    }
}
