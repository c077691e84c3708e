//! Adam with an L2 penalty folded into the gradient, plus the step-decay
//! learning-rate schedule.

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-5,
        }
    }
}

/// First and second moments per parameter tensor plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl AdamState {
    pub fn new(shapes: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let (m, v) = shapes
            .into_iter()
            .map(|(r, c)| (Tensor::zeros(r, c), Tensor::zeros(r, c)))
            .unzip();
        Self { m, v, t: 0 }
    }
}

/// One Adam update. `g ← g + wd·θ` is applied before the moment updates.
pub fn adam_step(
    params: &mut [&mut Tensor],
    grads: &[&Tensor],
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    if !(cfg.lr > 0.0) {
        return Err(Error::invalid(format!("learning rate must be positive, got {}", cfg.lr)));
    }
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::invalid(format!(
            "adam_step got {} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[i].shape() {
            return Err(Error::Shape {
                op: "adam_step",
                lhs: p.shape(),
                rhs: g.shape(),
            });
        }
        if !g.is_finite() {
            return Err(Error::NonFinite(format!("gradient of parameter {i}")));
        }
    }

    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (k, (theta, &grad)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            let grad = grad + cfg.weight_decay * *theta;
            m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * grad;
            v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * grad * grad;
            let m_hat = m[k] / bc1;
            let v_hat = v[k] / bc2;
            *theta -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// `base · decay^(epoch / every)` with integer division.
pub fn step_decay_lr(base: f64, decay: f64, every: usize, epoch: usize) -> f64 {
    if every == 0 {
        return base;
    }
    base * decay.powi((epoch / every) as i32)
}
