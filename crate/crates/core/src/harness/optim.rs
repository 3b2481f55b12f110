use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Real;

/// Adam with decoupled weight decay. Decay applies only to parameters
/// flagged `decay` in the store.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: Real,
    pub beta2: Real,
    pub eps: Real,
    pub weight_decay: Real,
    pub step: u64,
    pub m: Vec<Vec<Real>>,
    pub v: Vec<Vec<Real>>,
}

impl AdamW {
    pub fn new(store: &ParamStore, weight_decay: Real) -> Self {
        let zeros: Vec<Vec<Real>> = store
            .params()
            .iter()
            .map(|p| vec![0.0; p.tensor.numel()])
            .collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Applies one update from the gradients held in `store`.
    pub fn update(&mut self, store: &mut ParamStore, lr: Real) -> Result<()> {
        if self.m.len() != store.len() {
            return Err(Error::Config(format!(
                "optimizer tracks {} tensors, store has {}",
                self.m.len(),
                store.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for ((p, m), v) in store
            .params_mut()
            .iter_mut()
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            let decay = if p.decay { self.weight_decay } else { 0.0 };
            let g = match p.tensor.grad() {
                Some(g) => g.to_vec(),
                None if decay == 0.0 => continue,
                None => vec![0.0; p.tensor.numel()],
            };
            let data = p.tensor.data_mut();
            for k in 0..data.len() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                let mh = m[k] / c1;
                let vh = v[k] / c2;
                data[k] -= lr * (mh / (vh.sqrt() + self.eps) + decay * data[k]);
            }
        }
        Ok(())
    }
}

/// Linear warm-up from `floor · base` to `base`, then cosine decay back to
/// `floor · base` at the last step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OneCycle {
    pub base: Real,
    pub total_steps: usize,
    pub warmup_frac: Real,
    pub floor_frac: Real,
}

impl OneCycle {
    pub fn new(base: Real, total_steps: usize) -> Self {
        Self {
            base,
            total_steps,
            warmup_frac: 0.1,
            floor_frac: 1e-2,
        }
    }

    pub fn warmup_steps(&self) -> usize {
        ((self.warmup_frac * self.total_steps as Real).round() as usize)
            .clamp(1, self.total_steps.max(1))
    }

    pub fn lr(&self, step: usize) -> Real {
        let lo = self.floor_frac * self.base;
        let warm = self.warmup_steps();
        if step < warm {
            return lo + (self.base - lo) * step as Real / warm as Real;
        }
        let span = self.total_steps.saturating_sub(1).saturating_sub(warm);
        let progress = if span == 0 {
            1.0
        } else {
            ((step - warm) as Real / span as Real).min(1.0)
        };
        lo + (self.base - lo) * 0.5 * (1.0 + (PI as Real * progress).cos())
    }
}
