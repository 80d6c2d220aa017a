//! Layer-wise adaptive optimizer with decoupled weight decay.
//!
//! Each parameter tensor keeps first and second moment estimates; the update
//! direction is the bias-corrected moment ratio plus the decay term, rescaled
//! by the ratio of the parameter norm to the update norm. That trust ratio
//! keeps step sizes proportional to the scale of each tensor.

use crate::error::{Result, TensorError};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy)]
pub struct LambConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for LambConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-6,
            weight_decay: 1e-2,
        }
    }
}

pub struct Lamb<T: Scalar> {
    cfg: LambConfig,
    step: u64,
    moments: BTreeMap<String, (Vec<T>, Vec<T>)>,
}

impl<T: Scalar> Lamb<T> {
    pub fn new(cfg: LambConfig) -> Self {
        Self {
            cfg,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn config(&self) -> LambConfig {
        self.cfg
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update. Parameters absent from `grads` are left alone;
    /// a present gradient must match its parameter's element count.
    pub fn step(
        &mut self,
        params: &mut ParamStore<T>,
        grads: &BTreeMap<String, Vec<T>>,
    ) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.cfg.beta1.powi(t);
        let c2 = 1.0 - self.cfg.beta2.powi(t);
        let b1 = T::from_f64(self.cfg.beta1);
        let b2 = T::from_f64(self.cfg.beta2);
        let one_m_b1 = T::from_f64(1.0 - self.cfg.beta1);
        let one_m_b2 = T::from_f64(1.0 - self.cfg.beta2);
        let eps = T::from_f64(self.cfg.eps);
        let wd = T::from_f64(self.cfg.weight_decay);
        let inv_c1 = T::from_f64(1.0 / c1);
        let inv_c2 = T::from_f64(1.0 / c2);

        for (name, grad) in grads {
            let param = params.get_mut(name)?;
            if grad.len() != param.len() {
                return Err(TensorError::ShapeMismatch {
                    context: "optimizer grad",
                    lhs: vec![grad.len()],
                    rhs: vec![param.len()],
                });
            }
            if grad.iter().any(|v| !v.is_finite()) {
                return Err(TensorError::Numeric(format!(
                    "non-finite gradient for {name:?}"
                )));
            }
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![T::zero(); grad.len()], vec![T::zero(); grad.len()]));

            let w = param.data_mut();
            let mut w_sq = T::zero();
            let mut u_sq = T::zero();
            let mut update = vec![T::zero(); grad.len()];
            for i in 0..grad.len() {
                let g = grad[i];
                m[i] = b1 * m[i] + one_m_b1 * g;
                v[i] = b2 * v[i] + one_m_b2 * g * g;
                let m_hat = m[i] * inv_c1;
                let v_hat = v[i] * inv_c2;
                let u = m_hat / (v_hat.sqrt() + eps) + wd * w[i];
                update[i] = u;
                w_sq = w_sq + w[i] * w[i];
                u_sq = u_sq + u * u;
            }
            let w_norm = w_sq.sqrt();
            let u_norm = u_sq.sqrt();
            let trust = if w_norm > T::zero() && u_norm > T::zero() {
                w_norm / u_norm
            } else {
                T::one()
            };
            let scale = T::from_f64(self.cfg.lr) * trust;
            for i in 0..grad.len() {
                w[i] = w[i] - scale * update[i];
            }
        }
        Ok(())
    }

    /// Moment vectors for checkpointing, in name order.
    pub fn moments(&self) -> impl Iterator<Item = (&str, &[T], &[T])> {
        self.moments
            .iter()
            .map(|(n, (m, v))| (n.as_str(), m.as_slice(), v.as_slice()))
    }

    pub fn restore_moments(&mut self, name: &str, m: Vec<T>, v: Vec<T>) -> Result<()> {
        if m.len() != v.len() {
            return Err(TensorError::ShapeMismatch {
                context: "optimizer moment restore",
                lhs: vec![m.len()],
                rhs: vec![v.len()],
            });
        }
        self.moments.insert(name.to_string(), (m, v));
        Ok(())
    }

    pub fn set_step(&mut self, step: u64) {
        self.step = step;
    }
}
