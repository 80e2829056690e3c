//! Learning-rate schedule, Adam, and gradient clipping.

use crate::error::{Error, Result};
use crate::param::{Parameters, Tensor};
use crate::scalar::Scalar;

pub const LR_START: f64 = 2e-4;
pub const LR_MIN: f64 = 1e-7;

/// `lr_min + ½(lr_start − lr_min)(1 + cos(π·step/total))`.
pub fn cosine_lr(step: usize, total_steps: usize, lr_start: f64, lr_min: f64) -> Result<f64> {
    if step > total_steps {
        return Err(Error::InvalidParameter(format!("step {step} beyond schedule of {total_steps}")));
    }
    if total_steps == 0 {
        return Ok(lr_start);
    }
    let phase = std::f64::consts::PI * step as f64 / total_steps as f64;
    Ok(lr_min + 0.5 * (lr_start - lr_min) * (1.0 + phase.cos()))
}

/// Scales `grads` so their global norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_global_norm<T: Scalar, P: Parameters<T>>(grads: &mut P, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm && norm > 0.0 {
        grads.scale(T::lit(max_norm / norm));
    }
    norm
}

/// Bias-corrected Adam with moments kept per named tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Completed update count.
    pub t: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new<P: Parameters<T>>(params: &P) -> Self {
        let zeros: Vec<Tensor<T>> = params.tensors().iter().map(|(_, t)| Tensor::zeros(&t.shape)).collect();
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: zeros.clone(), v: zeros }
    }

    /// One update. Non-finite gradients reject the step and leave everything
    /// untouched.
    pub fn step<P: Parameters<T>>(&mut self, params: &mut P, grads: &P, lr: f64) -> Result<()> {
        let gs = grads.tensors();
        if gs.len() != self.m.len() {
            return Err(Error::ShapeMismatch(format!("{} gradient tensors, {} moments", gs.len(), self.m.len())));
        }
        for ((name, g), m) in gs.iter().zip(&self.m) {
            if g.shape != m.shape {
                return Err(Error::ShapeMismatch(format!("gradient {name}: {:?} vs {:?}", g.shape, m.shape)));
            }
            if g.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("gradient {name}")));
            }
        }
        self.t += 1;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
        let c1 = T::lit(1.0 - self.beta1.powi(self.t as i32));
        let c2 = T::lit(1.0 - self.beta2.powi(self.t as i32));
        let (lr, eps) = (T::lit(lr), T::lit(self.eps));
        for ((((_, p), (_, g)), m), v) in params.tensors_mut().into_iter().zip(gs).zip(&mut self.m).zip(&mut self.v) {
            for (((pv, &gv), mv), vv) in p.data.iter_mut().zip(&g.data).zip(&mut m.data).zip(&mut v.data) {
                *mv = b1 * *mv + one_b1 * gv;
                *vv = b2 * *vv + one_b2 * gv * gv;
                let mhat = *mv / c1;
                let vhat = *vv / c2;
                *pv -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
