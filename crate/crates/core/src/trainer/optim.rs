//! AdamW with linear warmup and cosine decay.

use std::collections::BTreeMap;

use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub base_lr: f64,
    pub total_steps: usize,
    pub warmup_steps: usize,
}

impl Schedule {
    pub fn new(base_lr: f64, total_steps: usize, warmup_ratio: f64) -> Self {
        let warmup_steps = ((total_steps as f64) * warmup_ratio).round() as usize;
        Schedule {
            base_lr,
            total_steps,
            warmup_steps: warmup_steps.min(total_steps),
        }
    }

    /// Learning rate at zero-based `step`.
    pub fn lr(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.base_lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps).max(1);
        let t = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        0.5 * self.base_lr * (1.0 + (std::f64::consts::PI * t).cos())
    }

    /// Fraction of warmup completed after `step`, used to ramp loss weights.
    pub fn ramp(&self, step: usize) -> f64 {
        if self.warmup_steps == 0 {
            1.0
        } else {
            ((step + 1) as f64 / self.warmup_steps as f64).min(1.0)
        }
    }
}

#[derive(Clone, Debug)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    state: BTreeMap<String, Moments>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            state: BTreeMap::new(),
        }
    }

    /// Update every parameter that has a gradient. Parameters without one are
    /// left untouched, including weight decay.
    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Tensor>, lr: f64) -> crate::Result<()> {
        for (name, grad) in grads {
            let p = params.get_mut(name)?;
            let st = self.state.entry(name.clone()).or_insert_with(|| Moments {
                m: vec![0.0; grad.numel()],
                v: vec![0.0; grad.numel()],
                t: 0,
            });
            st.t += 1;
            let c1 = 1.0 - self.beta1.powi(st.t as i32);
            let c2 = 1.0 - self.beta2.powi(st.t as i32);
            for (((x, &gi), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(st.m.iter_mut())
                .zip(st.v.iter_mut())
            {
                *m = self.beta1 * *m + (1.0 - self.beta1) * gi;
                *v = self.beta2 * *v + (1.0 - self.beta2) * gi * gi;
                let update = (*m / c1) / ((*v / c2).sqrt() + self.eps);
                *x -= lr * (update + self.weight_decay * *x);
            }
        }
        Ok(())
    }
}
