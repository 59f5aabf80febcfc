//! Adam with bias correction and the inverse-square-root warmup schedule.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.98;
pub const EPS: f64 = 1e-9;

/// `lr(t) = scale * d_model^-0.5 * min(t^-0.5, t * warmup^-1.5)` for steps `t >= 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WarmupSchedule {
    pub d_model: usize,
    pub warmup: usize,
    pub scale: f64,
}

impl WarmupSchedule {
    pub fn new(d_model: usize, warmup: usize) -> Self {
        Self {
            d_model,
            warmup,
            scale: 1.0,
        }
    }

    pub fn at(&self, step: usize) -> f64 {
        let t = step.max(1) as f64;
        let w = self.warmup.max(1) as f64;
        self.scale * (self.d_model as f64).powf(-0.5) * t.powf(-0.5).min(t * w.powf(-1.5))
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Moments {
    first: Vec<f64>,
    second: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: usize,
    moments: BTreeMap<String, Moments>,
}

impl Default for AdamState {
    fn default() -> Self {
        Self {
            beta1: BETA1,
            beta2: BETA2,
            eps: EPS,
            step: 0,
            moments: BTreeMap::new(),
        }
    }
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    /// One bias-corrected update of every parameter. Parameters missing from
    /// `grads` are updated with a zero gradient.
    pub fn step(
        &mut self,
        params: &mut BTreeMap<String, Tensor>,
        grads: &BTreeMap<String, Vec<f64>>,
        lr: f64,
    ) -> Result<()> {
        for (name, g) in grads {
            let Some(p) = params.get(name) else {
                return Err(Error::Config(format!("gradient for unknown parameter `{name}`")));
            };
            if g.len() != p.numel() {
                return Err(Error::Config(format!(
                    "gradient for `{name}` has {} entries, parameter has {}",
                    g.len(),
                    p.numel()
                )));
            }
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::Divergence {
                    step: self.step + 1,
                    reason: format!("non-finite gradient for `{name}`"),
                });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (name, p) in params.iter_mut() {
            let n = p.numel();
            let m = self.moments.entry(name.clone()).or_insert_with(|| Moments {
                first: vec![0.0; n],
                second: vec![0.0; n],
            });
            let g = grads.get(name);
            let data = p.data_mut();
            for i in 0..n {
                let gi = g.map_or(0.0, |g| g[i]);
                m.first[i] = self.beta1 * m.first[i] + (1.0 - self.beta1) * gi;
                m.second[i] = self.beta2 * m.second[i] + (1.0 - self.beta2) * gi * gi;
                let mh = m.first[i] / c1;
                let vh = m.second[i] / c2;
                data[i] -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
