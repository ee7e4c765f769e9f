//! In-place parameter updates.

use serde::{Deserialize, Serialize};

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

fn check(param: &[usize], grad: &[usize]) -> Result<()> {
    if param != grad {
        return Err(Error::shape("optimizer step", param, grad));
    }
    Ok(())
}

pub fn sgd_step<F: Scalar>(param: &mut Tensor<F>, grad: &Tensor<F>, lr: F) -> Result<()> {
    check(param.shape(), grad.shape())?;
    for (p, &g) in param.data_mut().iter_mut().zip(grad.data()) {
        *p -= lr * g;
    }
    Ok(())
}

/// First/second moment estimates for one tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam update. Moments are kept in `f64` regardless of `F`.
pub fn adam_step<F: Scalar>(
    param: &mut Tensor<F>,
    grad: &Tensor<F>,
    state: &mut AdamState,
    lr: f64,
    cfg: AdamConfig,
) -> Result<()> {
    check(param.shape(), grad.shape())?;
    if state.m.len() != param.len() {
        return Err(Error::shape("adam state", param.shape(), &[state.m.len()]));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (i, (p, g)) in param.data_mut().iter_mut().zip(grad.data()).enumerate() {
        let g = g.to_f64().unwrap_or(f64::NAN);
        let m = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        let v = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        state.m[i] = m;
        state.v[i] = v;
        let update = lr * (m / c1) / ((v / c2).sqrt() + cfg.eps);
        *p -= F::from_f64_lossy(update);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_basic_and_zero_lr() {
        let mut p = Tensor::scalar(1.0f64);
        sgd_step(&mut p, &Tensor::scalar(2.0), 0.1).unwrap();
        assert!((p.item() - 0.8).abs() < 1e-15);

        let mut p = Tensor::scalar(1.5f32);
        sgd_step(&mut p, &Tensor::scalar(7.0), 0.0).unwrap();
        assert_eq!(p.item(), 1.5);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        // m̂ = 1, v̂ = 1 after one step with g = 1, so Δ = lr / (1 + eps).
        let mut p = Tensor::scalar(1.0f64);
        let mut st = AdamState::new(1);
        adam_step(&mut p, &Tensor::scalar(1.0), &mut st, 0.01, AdamConfig::default()).unwrap();
        let expected = 1.0 - 0.01 / (1.0 + 1e-8);
        assert!((p.item() - expected).abs() < 1e-15);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn adam_zero_lr_is_identity() {
        let mut p = Tensor::scalar(0.25f32);
        let mut st = AdamState::new(1);
        adam_step(&mut p, &Tensor::scalar(3.0), &mut st, 0.0, AdamConfig::default()).unwrap();
        assert_eq!(p.item(), 0.25);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut p = Tensor::<f64>::zeros(&[2]);
        assert!(sgd_step(&mut p, &Tensor::zeros(&[3]), 0.1).is_err());
        let mut st = AdamState::new(2);
        assert!(adam_step(&mut p, &Tensor::zeros(&[3]), &mut st, 0.1, AdamConfig::default()).is_err());
    }
}
