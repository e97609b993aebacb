//! Bias-corrected Adam.

use crate::error::{Result, TensorError};
use crate::param::Param;
use crate::tensor::Tensor;
use crate::Float;

#[derive(Debug, Clone, Copy, PartialEq)]
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
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

/// Optimizer state: first/second moment estimates per parameter and the step count.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
}

impl<T: Float> Adam<T> {
    pub fn new(config: AdamConfig) -> Result<Self> {
        if !(config.lr > 0.0) {
            return Err(TensorError::InvalidArgument {
                op: "adam",
                reason: format!("learning rate must be positive, got {}", config.lr),
            });
        }
        Ok(Self {
            config,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Apply one update to `params` (in a fixed order) using their stored gradients.
    ///
    /// Parameters without a gradient are treated as having a zero gradient.
    /// If any gradient is non-finite nothing is modified.
    pub fn step(&mut self, params: &mut [&mut Param<T>]) -> Result<()> {
        if self.first.is_empty() {
            self.first = params.iter().map(|p| vec![T::zero(); p.value.numel()]).collect();
            self.second = self.first.clone();
        }
        if self.first.len() != params.len() {
            return Err(TensorError::InvalidArgument {
                op: "adam",
                reason: format!("optimizer tracks {} parameters, got {}", self.first.len(), params.len()),
            });
        }
        for (p, m) in params.iter().zip(&self.first) {
            if p.value.numel() != m.len() {
                return Err(TensorError::ShapeMismatch {
                    op: "adam",
                    expected: format!("{} elements", m.len()),
                    actual: format!("{:?} for `{}`", p.value.shape(), p.name),
                });
            }
            if let Some(g) = &p.grad {
                if g.shape() != p.value.shape() {
                    return Err(TensorError::ShapeMismatch {
                        op: "adam",
                        expected: format!("{:?}", p.value.shape()),
                        actual: format!("gradient {:?} for `{}`", g.shape(), p.name),
                    });
                }
                if !g.all_finite() {
                    return Err(TensorError::NonFiniteGradient(p.name.clone()));
                }
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let b1 = T::from_f64_lossy(c.beta1);
        let b2 = T::from_f64_lossy(c.beta2);
        let one = T::one();
        let bias1 = T::from_f64_lossy(1.0 - c.beta1.powi(t));
        let bias2 = T::from_f64_lossy(1.0 - c.beta2.powi(t));
        let lr = T::from_f64_lossy(c.lr);
        let eps = T::from_f64_lossy(c.eps);
        for ((p, m), v) in params.iter_mut().zip(&mut self.first).zip(&mut self.second) {
            let Some(g) = &p.grad else {
                // zero gradient: moments decay, parameter still moves by the momentum term
                for ((w, mi), vi) in p.value.data_mut().iter_mut().zip(m.iter_mut()).zip(v.iter_mut()) {
                    *mi = b1 * *mi;
                    *vi = b2 * *vi;
                    *w -= lr * (*mi / bias1) / ((*vi / bias2).sqrt() + eps);
                }
                continue;
            };
            let g: Tensor<T> = g.clone();
            for (((w, &gi), mi), vi) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = b1 * *mi + (one - b1) * gi;
                *vi = b2 * *vi + (one - b2) * gi * gi;
                *w -= lr * (*mi / bias1) / ((*vi / bias2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_param(v: f64) -> Param<f64> {
        Param::new("p", Tensor::scalar(v))
    }

    #[test]
    fn zero_gradient_leaves_params_and_advances_step() {
        let mut p = scalar_param(0.5);
        p.grad = Some(Tensor::scalar(0.0));
        let mut adam = Adam::new(AdamConfig::with_lr(0.1)).unwrap();
        for _ in 0..3 {
            adam.step(&mut [&mut p]).unwrap();
        }
        assert_eq!(p.value.data()[0], 0.5);
        assert_eq!(adam.step_count(), 3);
    }

    #[test]
    fn constant_gradient_moves_against_its_sign() {
        for g in [2.5, -0.3] {
            let mut p = scalar_param(0.0);
            let mut adam = Adam::new(AdamConfig::with_lr(0.01)).unwrap();
            let mut prev = 0.0;
            for _ in 0..50 {
                p.grad = Some(Tensor::scalar(g));
                adam.step(&mut [&mut p]).unwrap();
                let now = p.value.data()[0];
                assert!((now - prev) * g < 0.0);
                prev = now;
            }
        }
    }

    #[test]
    fn three_step_trace_matches_hand_computation() {
        // independent evaluation of the published update rule
        let (lr, b1, b2, eps) = (0.1f64, 0.9f64, 0.999f64, 1e-8f64);
        let (mut p_ref, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        let mut expected = Vec::new();
        for t in 1..=3 {
            let g = 1.0;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mhat = m / (1.0 - b1.powi(t));
            let vhat = v / (1.0 - b2.powi(t));
            p_ref -= lr * mhat / (vhat.sqrt() + eps);
            expected.push(p_ref);
        }
        // with a constant unit gradient both corrected moments are exactly 1
        for (t, e) in expected.iter().enumerate() {
            let closed = 1.0 - (t as f64 + 1.0) * lr / (1.0 + eps);
            assert!((e - closed).abs() < 1e-12);
        }
        let mut p = scalar_param(1.0);
        let mut adam = Adam::new(AdamConfig::with_lr(lr)).unwrap();
        for e in expected {
            p.grad = Some(Tensor::scalar(1.0));
            adam.step(&mut [&mut p]).unwrap();
            assert!((p.value.data()[0] - e).abs() < 1e-12);
        }
    }

    #[test]
    fn nan_gradient_rejected_without_side_effects() {
        let mut p = scalar_param(1.0);
        p.grad = Some(Tensor::scalar(f64::NAN));
        let mut adam = Adam::new(AdamConfig::default()).unwrap();
        let err = adam.step(&mut [&mut p]).unwrap_err();
        assert_eq!(err, TensorError::NonFiniteGradient("p".into()));
        assert_eq!(p.value.data()[0], 1.0);
        assert_eq!(adam.step_count(), 0);
    }

    #[test]
    fn non_positive_lr_rejected() {
        assert!(Adam::<f32>::new(AdamConfig::with_lr(0.0)).is_err());
    }
}
