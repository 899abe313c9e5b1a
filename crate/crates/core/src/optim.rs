//! Adam with an inverse-square-root warmup schedule.

use serde::{Deserialize, Serialize};

use crate::tensor::{ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
        }
    }
}

/// `peak_lr * min(step / warmup, sqrt(warmup / step))`, steps counted from 1.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LrSchedule {
    pub peak_lr: f64,
    pub warmup_steps: u64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule {
            peak_lr: 1e-3,
            warmup_steps: 100,
        }
    }
}

impl LrSchedule {
    pub fn lr(&self, step: u64) -> f64 {
        let s = step.max(1) as f64;
        let w = self.warmup_steps.max(1) as f64;
        self.peak_lr * (s / w).min((w / s).sqrt())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ParamStore) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|(_, t)| Tensor::zeros(t.rows, t.cols))
                .collect()
        };
        Adam {
            config,
            step: 0,
            first: zeros(),
            second: zeros(),
        }
    }

    pub fn matches(&self, params: &ParamStore) -> bool {
        self.first.len() == params.len()
            && self
                .first
                .iter()
                .zip(params.iter())
                .all(|(m, (_, p))| m.shape() == p.shape())
    }

    /// One update; parameters with a `None` gradient are left untouched.
    pub fn update(&mut self, params: &mut ParamStore, grads: &[Option<Tensor>], lr: f64) {
        assert_eq!(grads.len(), params.len());
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (idx, id) in params.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let Some(g) = &grads[idx] else { continue };
            let p = params.get_mut(id);
            let (m, v) = (&mut self.first[idx], &mut self.second[idx]);
            for i in 0..p.data.len() {
                let gi = g.data[i];
                m.data[i] = beta1 * m.data[i] + (1.0 - beta1) * gi;
                v.data[i] = beta2 * v.data[i] + (1.0 - beta2) * gi * gi;
                let mhat = m.data[i] / c1;
                let vhat = v.data[i] / c2;
                p.data[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_peaks_at_warmup() {
        let s = LrSchedule {
            peak_lr: 1.0,
            warmup_steps: 100,
        };
        assert!((s.lr(100) - 1.0).abs() < 1e-12);
        assert!((s.lr(50) - 0.5).abs() < 1e-12);
        assert!((s.lr(400) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn adam_descends_on_quadratic() {
        let mut params = ParamStore::new();
        let id = params.add("x", Tensor::from_vec(1, 2, vec![3.0, -2.0]));
        let mut opt = Adam::new(AdamConfig::default(), &params);
        for _ in 0..500 {
            let x = params.get(id).clone();
            let g = Tensor::from_vec(1, 2, x.data.iter().map(|v| 2.0 * v).collect());
            opt.update(&mut params, &[Some(g)], 0.05);
        }
        assert!(params.get(id).data.iter().all(|v| v.abs() < 0.05));
    }
}
