//! LAMB optimizer: Adam-style moments with a per-tensor trust ratio
//! `||w|| / ||update||` scaling each step (You et al.). Weight decay is
//! decoupled and skipped for layer-norm and bias tensors.

use crate::error::{Error, Result};
use crate::model::{ModelParams, Scalar};
use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LambConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for LambConfig {
    fn default() -> Self {
        LambConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-6,
            weight_decay: 0.01,
        }
    }
}

/// Per-parameter first/second moment accumulators plus the step counter.
pub struct OptimizerState<T> {
    m: Vec<ArrayD<T>>,
    v: Vec<ArrayD<T>>,
    step: u64,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(params: &ModelParams<T>) -> Self {
        let zeros: Vec<ArrayD<T>> = params
            .tensors()
            .into_iter()
            .map(|(_, view)| ArrayD::zeros(view.raw_dim()))
            .collect();
        OptimizerState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One LAMB update. `grads` must mirror `params` tensor-for-tensor.
pub fn lamb_step<T: Scalar>(
    params: &mut ModelParams<T>,
    grads: &ModelParams<T>,
    state: &mut OptimizerState<T>,
    learning_rate: f64,
    config: &LambConfig,
) -> Result<()> {
    if !grads.all_finite() {
        return Err(Error::NonFiniteGradient {
            batch: state.step as usize,
        });
    }
    state.step += 1;
    let t = state.step as i32;
    let beta1 = T::from_f64(config.beta1);
    let beta2 = T::from_f64(config.beta2);
    let one_m_beta1 = T::from_f64(1.0 - config.beta1);
    let one_m_beta2 = T::from_f64(1.0 - config.beta2);
    let bc1 = T::from_f64(1.0 - config.beta1.powi(t));
    let bc2 = T::from_f64(1.0 - config.beta2.powi(t));
    let eps = T::from_f64(config.eps);
    let lr = T::from_f64(learning_rate);

    let grad_views = grads.tensors();
    for (idx, (_, mut w)) in params.tensors_mut().into_iter().enumerate() {
        let g = &grad_views[idx].1;
        let m = &mut state.m[idx];
        let v = &mut state.v[idx];
        // weight decay applies to weight matrices only, not layer-norm
        // gains or bias vectors
        let wd = if w.ndim() >= 2 {
            T::from_f64(config.weight_decay)
        } else {
            T::zero()
        };

        m.zip_mut_with(g, |mi, &gi| *mi = beta1 * *mi + one_m_beta1 * gi);
        v.zip_mut_with(g, |vi, &gi| *vi = beta2 * *vi + one_m_beta2 * gi * gi);

        // r = m_hat / (sqrt(v_hat) + eps) + wd * w
        let mut update = m.clone();
        for ((u, &vi), &wi) in update.iter_mut().zip(v.iter()).zip(w.iter()) {
            let m_hat = *u / bc1;
            let v_hat = vi / bc2;
            *u = m_hat / (v_hat.sqrt() + eps) + wd * wi;
        }

        let mut w_norm = T::zero();
        for &wi in w.iter() {
            w_norm = w_norm + wi * wi;
        }
        w_norm = w_norm.sqrt();
        let mut r_norm = T::zero();
        for &u in update.iter() {
            r_norm = r_norm + u * u;
        }
        r_norm = r_norm.sqrt();
        let trust = if w_norm > T::zero() && r_norm > T::zero() {
            w_norm / r_norm
        } else {
            T::one()
        };

        let scale = lr * trust;
        w.zip_mut_with(&update, |wi, &u| *wi = *wi - scale * u);
    }
    Ok(())
}
