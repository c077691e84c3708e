//! EM estimation of a von Mises-Fisher mean direction.
//!
//! The node embedding is modelled as `h_i ~ vMF(c, 1)` and each neighbor as
//! `h_j ~ vMF(c, α_j)` with the concentrations `α_j` latent. The E-step sets
//! `α̂_j = exp(h_jᵀ c) / Σ_k exp(h_kᵀ c)`; the M-step maximizes
//! `Q(c) = h_iᵀ c + Σ_j α̂_j h_jᵀ c` on the unit sphere, whose maximizer is
//! `c = (h_i + Σ_j α̂_j h_j) / ‖h_i + Σ_j α̂_j h_j‖`.
//!
//! This module deliberately shares no code with the propagation path so it
//! can serve as an oracle for it.

use crate::error::{Error, Result};

const UNIT_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub struct VmfInstance {
    /// Observation with unit concentration around the mean direction.
    pub h_i: Vec<f64>,
    pub neighbors: Vec<Vec<f64>>,
    /// Current concentration estimates, one per neighbor.
    pub concentrations: Vec<f64>,
    /// Current mean-direction estimate.
    pub mean_direction: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmStep {
    pub alphas: Vec<f64>,
    pub c_next: Vec<f64>,
    /// `Q` at `c_next` under the E-step weights `alphas`.
    pub q_value: f64,
}

fn inner(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for k in 0..a.len() {
        s += a[k] * b[k];
    }
    s
}

fn is_unit(v: &[f64]) -> bool {
    (inner(v, v).sqrt() - 1.0).abs() <= UNIT_TOL
}

impl VmfInstance {
    /// Starts EM at `c = h_i` with uniform concentrations.
    pub fn new(h_i: Vec<f64>, neighbors: Vec<Vec<f64>>) -> Result<Self> {
        let k = neighbors.len();
        let inst = Self {
            mean_direction: h_i.clone(),
            concentrations: vec![if k == 0 { 0.0 } else { 1.0 / k as f64 }; k],
            h_i,
            neighbors,
        };
        inst.validate()?;
        Ok(inst)
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.h_i.len();
        if self.neighbors.is_empty() {
            return Err(Error::invalid("vMF instance needs at least one neighbor"));
        }
        if self.concentrations.len() != self.neighbors.len() {
            return Err(Error::invalid("one concentration per neighbor required"));
        }
        if self.concentrations.iter().any(|&a| !(a >= 0.0)) {
            return Err(Error::invalid("concentrations must be nonnegative"));
        }
        let vectors = std::iter::once(&self.h_i)
            .chain(self.neighbors.iter())
            .chain(std::iter::once(&self.mean_direction));
        for v in vectors {
            if v.len() != d {
                return Err(Error::Shape {
                    op: "vmf_instance",
                    lhs: (1, d),
                    rhs: (1, v.len()),
                });
            }
            if !is_unit(v) {
                return Err(Error::invalid("vMF instance vectors must be unit-norm"));
            }
        }
        Ok(())
    }

    /// Adopts the result of an EM step as the current estimate.
    pub fn advance(&mut self, step: &EmStep) {
        self.concentrations = step.alphas.clone();
        self.mean_direction = step.c_next.clone();
    }

    /// `Q(c) = h_iᵀ c + Σ_j α_j h_jᵀ c` for arbitrary weights and direction.
    pub fn q_function(&self, alphas: &[f64], c: &[f64]) -> f64 {
        let mut q = inner(&self.h_i, c);
        for (j, h_j) in self.neighbors.iter().enumerate() {
            q += alphas[j] * inner(h_j, c);
        }
        q
    }

    /// `h_iᵀ c + ln Σ_j exp(h_jᵀ c)`: the objective that the E/M
    /// alternation ascends (the E-step weights are its gradient weights).
    pub fn log_likelihood(&self, c: &[f64]) -> f64 {
        let dots: Vec<f64> = self.neighbors.iter().map(|h_j| inner(h_j, c)).collect();
        let m = dots.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + dots.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
        inner(&self.h_i, c) + lse
    }
}

/// One E-step at the instance's current mean direction followed by one
/// M-step.
pub fn em_iterate(instance: &VmfInstance) -> EmStep {
    let c = &instance.mean_direction;
    let d = instance.h_i.len();

    // E-step, via log-sum-exp
    let scores: Vec<f64> = instance.neighbors.iter().map(|h_j| inner(h_j, c)).collect();
    let top = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_z = top + scores.iter().map(|s| (s - top).exp()).sum::<f64>().ln();
    let alphas: Vec<f64> = scores.iter().map(|s| (s - log_z).exp()).collect();

    // M-step: stationary point of the Lagrangian with λ = -1/2, then the
    // unit-norm constraint
    let mut direction = vec![0.0; d];
    for k in 0..d {
        let mut acc = instance.h_i[k];
        for (j, h_j) in instance.neighbors.iter().enumerate() {
            acc += alphas[j] * h_j[k];
        }
        direction[k] = acc;
    }
    let length = inner(&direction, &direction).sqrt();
    let c_next: Vec<f64> = direction.iter().map(|x| x / length).collect();

    let q_value = instance.q_function(&alphas, &c_next);
    EmStep {
        alphas,
        c_next,
        q_value,
    }
}

/// Runs `iterations` EM steps from the instance's current state.
pub fn em_run(instance: &VmfInstance, iterations: usize) -> Vec<EmStep> {
    let mut state = instance.clone();
    let mut steps = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        let step = em_iterate(&state);
        state.advance(&step);
        steps.push(step);
    }
    steps
}
