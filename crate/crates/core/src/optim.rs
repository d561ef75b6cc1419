//! Parameter update rules.
//!
//! Updates are written per element so that a caller can apply them to any
//! subset of a parameter (the prefix block touched by a subnetwork step)
//! while leaving the rest, and its optimizer moments, untouched.

use serde::{Deserialize, Serialize};

use crate::tensor::Float;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    AdamW,
    Sgd,
}

/// Decoupled-weight-decay Adam.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.05 }
    }
}

/// Per-step constants of an AdamW update, converted once to `T`.
#[derive(Debug, Clone, Copy)]
pub struct AdamWStep<T> {
    lr: T,
    beta1: T,
    beta2: T,
    one_minus_beta1: T,
    one_minus_beta2: T,
    bias1: T,
    bias2: T,
    eps: T,
    decay: T,
}

impl AdamW {
    /// Constants for update number `step` (1-based) at learning rate `lr`.
    pub fn step<T: Float>(&self, step: u64, lr: f64) -> AdamWStep<T> {
        let t = step.max(1) as i32;
        AdamWStep {
            lr: T::lit(lr),
            beta1: T::lit(self.beta1),
            beta2: T::lit(self.beta2),
            one_minus_beta1: T::lit(1.0 - self.beta1),
            one_minus_beta2: T::lit(1.0 - self.beta2),
            bias1: T::lit(1.0 - self.beta1.powi(t)),
            bias2: T::lit(1.0 - self.beta2.powi(t)),
            eps: T::lit(self.eps),
            decay: T::lit(1.0 - lr * self.weight_decay),
        }
    }
}

impl<T: Float> AdamWStep<T> {
    /// Updates one parameter entry and its first/second moments in place.
    #[inline]
    pub fn apply(&self, param: &mut T, grad: T, m: &mut T, v: &mut T, decay: bool) {
        if decay {
            *param *= self.decay;
        }
        *m = self.beta1 * *m + self.one_minus_beta1 * grad;
        *v = self.beta2 * *v + self.one_minus_beta2 * grad * grad;
        let m_hat = *m / self.bias1;
        let v_hat = *v / self.bias2;
        *param -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
    }
}

/// Applies AdamW to whole slices.
pub fn adamw_step<T: Float>(params: &mut [T], grads: &[T], m: &mut [T], v: &mut [T], step: &AdamWStep<T>, decay: bool) {
    for i in 0..params.len() {
        step.apply(&mut params[i], grads[i], &mut m[i], &mut v[i], decay);
    }
}

/// Plain gradient descent.
#[inline]
pub fn sgd_update<T: Float>(param: &mut T, grad: T, lr: T) {
    *param -= lr * grad;
}

pub fn sgd_step<T: Float>(params: &mut [T], grads: &[T], lr: T) {
    for (p, &g) in params.iter_mut().zip(grads) {
        sgd_update(p, g, lr);
    }
}
