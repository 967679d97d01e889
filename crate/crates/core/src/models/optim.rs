use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!(
                "invalid Adam settings {self:?}"
            )))
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
    mask: Vec<bool>,
}

impl Adam {
    /// `mask[i] == false` freezes parameter `i`.
    pub fn new(config: AdamConfig, mask: Vec<bool>) -> Self {
        let n = mask.len();
        Self {
            config,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            mask,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        self.t += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let c1 = 1.0 - beta1.powi(self.t);
        let c2 = 1.0 - beta2.powi(self.t);
        for i in 0..params.len() {
            if !self.mask[i] {
                continue;
            }
            let g = grads[i];
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
            params[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + eps);
        }
    }
}

/// Multiplies the learning rate by `factor` once the monitored metric has
/// failed to improve by at least `min_delta` for `patience` epochs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlateauScheduler {
    pub factor: f64,
    pub patience: usize,
    pub min_delta: f64,
    pub min_lr: f64,
    best: Option<f64>,
    stale: usize,
}

impl Default for PlateauScheduler {
    fn default() -> Self {
        Self::new(0.1, 2)
    }
}

impl PlateauScheduler {
    pub fn new(factor: f64, patience: usize) -> Self {
        Self {
            factor,
            patience,
            min_delta: 1e-4,
            min_lr: 1e-7,
            best: None,
            stale: 0,
        }
    }

    /// Feeds one epoch's metric (higher is better) and returns the new rate.
    pub fn observe(&mut self, metric: f64, lr: f64) -> f64 {
        let improved = match self.best {
            None => metric.is_finite(),
            Some(best) => metric >= best + self.min_delta,
        };
        if improved {
            self.best = Some(metric);
            self.stale = 0;
            return lr;
        }
        self.stale += 1;
        if self.stale >= self.patience {
            self.stale = 0;
            (lr * self.factor).max(self.min_lr)
        } else {
            lr
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_minimizes_quadratic() {
        let mut p = vec![3.0, -2.0];
        let mut opt = Adam::new(
            AdamConfig {
                lr: 0.1,
                ..Default::default()
            },
            vec![true, false],
        );
        for _ in 0..500 {
            let g: Vec<f64> = p.iter().map(|x| 2.0 * x).collect();
            opt.step(&mut p, &g);
        }
        assert!(p[0].abs() < 1e-2);
        assert_eq!(p[1], -2.0);
    }

    #[test]
    fn plateau_decays_after_patience() {
        let mut s = PlateauScheduler::new(0.1, 2);
        let mut lr = 1.0;
        lr = s.observe(0.5, lr);
        lr = s.observe(0.50005, lr);
        assert_eq!(lr, 1.0);
        lr = s.observe(0.5, lr);
        assert!((lr - 0.1).abs() < 1e-15);
        lr = s.observe(0.6, lr);
        assert!((lr - 0.1).abs() < 1e-15);
    }
}
