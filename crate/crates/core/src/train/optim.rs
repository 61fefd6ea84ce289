use std::collections::BTreeMap;
use std::f64::consts::PI;

use crate::error::{Result, SvdcError};
use crate::net::ModelParams;
use crate::tensor::Tensor;

/// Adam with decoupled weight decay; the decay is scaled by the learning
/// rate, so a zero learning rate leaves parameters untouched.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, step: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn moments_finite(&self) -> bool {
        self.m.values().chain(self.v.values()).all(|x| x.iter().all(|v| v.is_finite()))
    }

    /// One update with `grads` keyed by parameter name. Parameters without a
    /// gradient entry only receive weight decay.
    pub fn step(&mut self, params: &mut ModelParams, grads: &BTreeMap<String, Tensor>, lr: f64) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, p) in params.iter_mut() {
            let n = p.numel();
            let m = self.m.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
            let g = grads.get(name).map(Tensor::data);
            if let Some(g) = g {
                if g.len() != n {
                    return Err(SvdcError::Shape(format!("gradient for {name} has {} entries, expected {n}", g.len())));
                }
            }
            for (i, pv) in p.data_mut().iter_mut().enumerate() {
                *pv *= 1.0 - lr * self.weight_decay;
                let gi = g.map_or(0.0, |g| g[i]);
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                *pv -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Clamps every gradient entry to `[-limit, limit]`.
pub fn clip_gradients(grads: &mut BTreeMap<String, Tensor>, limit: f64) {
    for g in grads.values_mut() {
        for v in g.data_mut() {
            *v = v.clamp(-limit, limit);
        }
    }
}

/// One-cycle schedule: cosine warm-up from `lr_max / div` to `lr_max` over
/// the first `warmup_frac` of the steps, then cosine decay to
/// `lr_max / (div * final_div)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OneCycle {
    pub lr_max: f64,
    pub total_steps: usize,
    pub warmup_frac: f64,
    pub div: f64,
    pub final_div: f64,
}

impl OneCycle {
    pub fn new(lr_max: f64, total_steps: usize, warmup_frac: f64) -> Self {
        Self { lr_max, total_steps, warmup_frac, div: 25.0, final_div: 1e4 }
    }

    /// Index of the step at which the rate peaks.
    pub fn peak_step(&self) -> usize {
        ((self.warmup_frac * self.total_steps as f64).round() as usize).min(self.total_steps.saturating_sub(1))
    }

    pub fn lr(&self, step: usize) -> f64 {
        let lo = self.lr_max / self.div;
        let end = lo / self.final_div;
        let peak = self.peak_step();
        if step <= peak {
            if peak == 0 {
                return self.lr_max;
            }
            let p = step as f64 / peak as f64;
            // written so that p == 1 yields lr_max exactly
            self.lr_max - (self.lr_max - lo) * (1.0 + (PI * p).cos()) / 2.0
        } else {
            let span = (self.total_steps - 1 - peak).max(1) as f64;
            let p = ((step - peak) as f64 / span).min(1.0);
            end + (self.lr_max - end) * (1.0 + (PI * p).cos()) / 2.0
        }
    }
}
