use crate::error::{Error, Result};

use super::scalar::{all_finite, Scalar};
use super::tensor::Tensor;

/// Adam hyperparameters and per-parameter moment estimates.
#[derive(Clone, Debug)]
pub struct AdamState<S> {
    learning_rate: S,
    pub beta1: S,
    pub beta2: S,
    pub eps: S,
    step: u64,
    first: Vec<Vec<S>>,
    second: Vec<Vec<S>>,
}

impl<S: Scalar> AdamState<S> {
    /// Standard betas (0.9, 0.999) and epsilon 1e-8.
    pub fn new(learning_rate: S) -> Result<Self> {
        if !(learning_rate > S::zero()) {
            return Err(Error::invalid("adam", "learning rate must be positive"));
        }
        Ok(Self {
            learning_rate,
            beta1: S::of(0.9),
            beta2: S::of(0.999),
            eps: S::of(1e-8),
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        })
    }

    pub fn learning_rate(&self) -> S {
        self.learning_rate
    }

    pub fn set_learning_rate(&mut self, lr: S) -> Result<()> {
        if !(lr > S::zero()) {
            return Err(Error::invalid("adam", "learning rate must be positive"));
        }
        self.learning_rate = lr;
        Ok(())
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update of every parameter carrying a gradient.
    ///
    /// Parameters are matched to moment buffers by position, so callers must
    /// pass the same list in the same order on every step. Parameters without
    /// a gradient are left untouched.
    pub fn step(&mut self, params: &mut [&mut Tensor<S>]) -> Result<()> {
        if self.first.is_empty() {
            self.first = params.iter().map(|p| vec![S::zero(); p.numel()]).collect();
            self.second = self.first.clone();
        }
        if self.first.len() != params.len() {
            return Err(Error::invalid(
                "adam",
                format!("optimizer tracks {} parameters, got {}", self.first.len(), params.len()),
            ));
        }
        for (p, m) in params.iter().zip(&self.first) {
            if p.numel() != m.len() {
                return Err(Error::shape("adam", p.shape(), &[m.len()]));
            }
            if let Some(g) = p.grad() {
                if !all_finite(g) {
                    return Err(Error::NonFinite { op: "adam" });
                }
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = S::one() - self.beta1.powi(t);
        let bc2 = S::one() - self.beta2.powi(t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.learning_rate, self.eps);
        for ((p, m), v) in params.iter_mut().zip(&mut self.first).zip(&mut self.second) {
            let Some(g) = p.grad().map(<[S]>::to_vec) else { continue };
            let data = p.data_mut();
            for i in 0..data.len() {
                m[i] = b1 * m[i] + (S::one() - b1) * g[i];
                v[i] = b2 * v[i] + (S::one() - b2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                data[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
