//! AdamW with decoupled weight decay.

use thiserror::Error;

use crate::nn::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OptimError {
    #[error("gradient for parameter '{name}' has non-finite entries; step rejected")]
    NonFiniteGradient { name: String },
    #[error("gradient for parameter '{name}' has shape {got:?}, parameter is {expected:?}")]
    ShapeMismatch { name: String, expected: Vec<usize>, got: Vec<usize> },
    #[error("expected {expected} gradients, got {got}")]
    Count { expected: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-4 }
    }
}

pub struct AdamW<T> {
    pub config: AdamWConfig,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(config: AdamWConfig, params: &ParamStore<T>) -> Self {
        let zeros = |t: &Tensor<T>| vec![T::zero(); t.len()];
        Self { config, step: 0, m: params.values().map(zeros).collect(), v: params.values().map(zeros).collect() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update. Nothing is modified when any gradient is rejected.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[Tensor<T>]) -> Result<(), OptimError> {
        if grads.len() != params.len() {
            return Err(OptimError::Count { expected: params.len(), got: grads.len() });
        }
        for ((name, p), g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(OptimError::ShapeMismatch {
                    name: name.to_string(),
                    expected: p.shape().to_vec(),
                    got: g.shape().to_vec(),
                });
            }
            if !g.all_finite() {
                return Err(OptimError::NonFiniteGradient { name: name.to_string() });
            }
        }
        self.step += 1;
        let c = self.config;
        let f = T::from_f64_lossy;
        let (b1, b2) = (f(c.beta1), f(c.beta2));
        let bc1 = f(1.0 - c.beta1.powi(self.step as i32));
        let bc2 = f(1.0 - c.beta2.powi(self.step as i32));
        let lr = f(c.lr);
        let decay = f(1.0 - c.lr * c.weight_decay);
        let eps = f(c.eps);
        for (i, g) in grads.iter().enumerate() {
            let p = params.value_mut(i);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[j] = b1 * m[j] + (T::one() - b1) * gj;
                v[j] = b2 * v[j] + (T::one() - b2) * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                *w = *w * decay - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(v: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("w", Tensor::from_f64(&[1], &[v]).unwrap());
        s
    }

    #[test]
    fn zero_gradient_no_decay_is_noop() {
        let mut p = store(0.7);
        let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.0, ..Default::default() }, &p);
        opt.step(&mut p, &[Tensor::zeros(&[1]).unwrap()]).unwrap();
        assert_eq!(p.value(0).data()[0], 0.7);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = store(1.0);
        let cfg = AdamWConfig { lr: 0.01, weight_decay: 0.0, ..Default::default() };
        let mut opt = AdamW::new(cfg, &p);
        opt.step(&mut p, &[Tensor::ones(&[1]).unwrap()]).unwrap();
        // mhat = 1, vhat = 1 → Δ = -lr / (1 + eps)
        assert!((p.value(0).data()[0] - (1.0 - 0.01)).abs() < 1e-9);
    }

    #[test]
    fn decay_is_decoupled() {
        let mut p = store(2.0);
        let cfg = AdamWConfig { lr: 0.1, weight_decay: 0.5, ..Default::default() };
        let mut opt = AdamW::new(cfg, &p);
        opt.step(&mut p, &[Tensor::zeros(&[1]).unwrap()]).unwrap();
        assert!((p.value(0).data()[0] - 2.0 * (1.0 - 0.1 * 0.5)).abs() < 1e-12);
    }

    #[test]
    fn non_finite_gradient_rejected() {
        let mut p = store(2.0);
        let mut opt = AdamW::new(AdamWConfig::default(), &p);
        let err = opt.step(&mut p, &[Tensor::from_f64(&[1], &[f64::NAN]).unwrap()]).unwrap_err();
        assert!(err.to_string().contains("'w'"));
        assert_eq!(p.value(0).data()[0], 2.0);
        assert_eq!(opt.steps_taken(), 0);
    }
}
