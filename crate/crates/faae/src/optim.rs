//! Adam with bias correction, plus inverse-time learning-rate decay.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First/second moment accumulators for one network's parameter list.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(param_shapes: &[usize]) -> Self {
        AdamState {
            m: param_shapes.iter().map(|&n| vec![T::zero(); n]).collect(),
            v: param_shapes.iter().map(|&n| vec![T::zero(); n]).collect(),
            t: 0,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            epsilon: ADAM_EPS,
        }
    }

    pub fn for_params(params: &[&Tensor<T>]) -> Self {
        let shapes: Vec<usize> = params.iter().map(|t| t.numel()).collect();
        AdamState::new(&shapes)
    }
}

/// lr0 / (1 + decay * step).
pub fn decayed_lr(lr0: f64, decay: f64, step: u64) -> f64 {
    lr0 / (1.0 + decay * step as f64)
}

/// One Adam application over a parameter list. Aborts without touching any
/// parameter if a gradient is non-finite.
pub fn adam_update<T: Scalar>(
    params: &mut [&mut Tensor<T>],
    grads: &[Vec<T>],
    names: &[String],
    state: &mut AdamState<T>,
    lr_t: f64,
) -> Result<()> {
    if lr_t <= 0.0 {
        return Err(Error::Contract(format!("learning rate must be positive, got {lr_t}")));
    }
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Contract(format!(
            "adam_update: {} params, {} grads, {} states",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, g) in grads.iter().enumerate() {
        if let Some(bad) = g.iter().find(|v| !v.tof().is_finite()) {
            let name = names.get(i).map(String::as_str).unwrap_or("?");
            return Err(Error::Numerical(format!(
                "non-finite gradient {bad} in parameter {name}"
            )));
        }
    }
    state.t += 1;
    let b1 = T::fromf(state.beta1);
    let b2 = T::fromf(state.beta2);
    let one = T::one();
    let corr1 = T::fromf(1.0 - state.beta1.powi(state.t as i32));
    let corr2 = T::fromf(1.0 - state.beta2.powi(state.t as i32));
    let lr = T::fromf(lr_t);
    let eps = T::fromf(state.epsilon);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        for j in 0..p.data.len() {
            let gj = g[j];
            m[j] = b1 * m[j] + (one - b1) * gj;
            v[j] = b2 * v[j] + (one - b2) * gj * gj;
            let m_hat = m[j] / corr1;
            let v_hat = v[j] / corr2;
            p.data[j] = p.data[j] - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
