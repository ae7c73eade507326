//! Adam with linear warm-up and stepwise-exponential decay.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::params::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub lr_peak: f64,
    pub warmup_steps: usize,
    pub decay_rate: f64,
    pub decay_interval: usize,
}

impl Schedule {
    /// Rate for 1-based `step`: linear ramp to the peak at `warmup_steps`,
    /// then `peak · decay_rate^((step − warmup) / decay_interval)`.
    pub fn lr(&self, step: usize) -> f64 {
        if step <= self.warmup_steps {
            if self.warmup_steps == 0 {
                return self.lr_peak;
            }
            self.lr_peak * step as f64 / self.warmup_steps as f64
        } else {
            let e = (step - self.warmup_steps) as f64 / self.decay_interval.max(1) as f64;
            self.lr_peak * self.decay_rate.powf(e)
        }
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Default for Adam {
    fn default() -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }
}

impl Adam {
    /// One update with bias correction for 1-based `step`. Only trainable
    /// parameters holding a gradient are touched.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64, step: usize) {
        let step = step.max(1) as i32;
        let c1 = 1.0 - self.beta1.powi(step);
        let c2 = 1.0 - self.beta2.powi(step);
        for (name, t) in store.iter_mut() {
            if !t.requires_grad {
                continue;
            }
            let Some(g) = t.grad.take() else { continue };
            let m = self.m.entry(name.to_string()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(name.to_string()).or_insert_with(|| vec![0.0; g.len()]);
            for (((p, &gi), mi), vi) in t.data_mut().iter_mut().zip(&g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *p -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
            t.grad = Some(g);
        }
    }
}
