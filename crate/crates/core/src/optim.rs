//! Adam with bias-corrected moments and exponential per-epoch decay.

use serde::{Deserialize, Serialize};

use crate::tensor::{Parameter, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moments are kept in `f64` regardless of the parameter precision.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    pub lr: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            lr: config.learning_rate,
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// `lr <- lr * factor`.
    pub fn decay(&mut self, factor: f64) {
        self.lr *= factor;
    }

    /// Applies one update from the accumulated gradients. Parameters must be
    /// passed in the same order on every call.
    pub fn step<T: Scalar>(&mut self, params: &mut [&mut Parameter<T>]) {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = self.m.clone();
        }
        assert_eq!(self.m.len(), params.len(), "parameter list changed between steps");
        self.step += 1;
        let AdamConfig { beta1, beta2, eps, .. } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let grads = p.grad.data().to_vec();
            for (((w, g), m), v) in p.value.data_mut().iter_mut().zip(grads).zip(m.iter_mut()).zip(v.iter_mut()) {
                let g = g.as_f64();
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let update = self.lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                *w = T::of(w.as_f64() - update);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn param(values: &[f64], grads: &[f64]) -> Parameter<f32> {
        let mut p = Parameter::new("p", Tensor::from_f64(&[values.len()], values).unwrap());
        p.grad = Tensor::from_f64(&[grads.len()], grads).unwrap();
        p
    }

    #[test]
    fn zero_learning_rate_is_identity() {
        let mut p = param(&[0.1, -3.5, 7.25e-3], &[1.0, -2.0, 0.5]);
        let before = p.value.clone();
        let mut opt = Adam::new(AdamConfig {
            learning_rate: 0.0,
            ..AdamConfig::default()
        });
        opt.step(&mut [&mut p]);
        assert_eq!(p.value, before);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // With bias correction the first update is lr * g / (|g| + eps).
        let mut p = param(&[1.0, 1.0], &[4.0, -0.5]);
        let mut opt = Adam::new(AdamConfig::default());
        opt.step(&mut [&mut p]);
        let v = p.value.to_f64_vec();
        assert!((v[0] - (1.0 - 1e-3)).abs() < 1e-6);
        assert!((v[1] - (1.0 + 1e-3)).abs() < 1e-6);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut p = param(&[3.0, -2.0], &[0.0, 0.0]);
        let mut opt = Adam::new(AdamConfig {
            learning_rate: 0.05,
            ..AdamConfig::default()
        });
        for _ in 0..2000 {
            let g: Vec<f64> = p.value.to_f64_vec().iter().map(|w| 2.0 * w).collect();
            p.grad = Tensor::from_f64(&[2], &g).unwrap();
            opt.step(&mut [&mut p]);
        }
        assert!(p.value.to_f64_vec().iter().all(|w| w.abs() < 1e-2));
    }

    #[test]
    fn decay_is_multiplicative() {
        let mut opt = Adam::new(AdamConfig::default());
        opt.decay(0.95);
        opt.decay(0.95);
        assert!((opt.lr - 1e-3 * 0.9025).abs() < 1e-15);
    }
}
