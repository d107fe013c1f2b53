use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{shape_err, Error, Result};

/// Adam moment accumulators for one parameter group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub first_moment: Vec<Tensor>,
    pub second_moment: Vec<Tensor>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// Outcome of one [`AdamState::step`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepReport {
    /// Indices of parameters whose update was skipped because of a non-finite gradient.
    pub skipped: Vec<usize>,
}

impl AdamState {
    /// Fresh state with the canonical defaults β₁ = 0.9, β₂ = 0.999, ε = 1e-8.
    pub fn new(params: &[&Tensor]) -> Self {
        Self::with_hyper(params, 0.9, 0.999, 1e-8)
    }

    pub fn with_hyper(params: &[&Tensor], beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = |p: &&Tensor| Tensor::zeros(p.shape().to_vec());
        Self {
            first_moment: params.iter().map(zeros).collect(),
            second_moment: params.iter().map(zeros).collect(),
            step: 0,
            beta1,
            beta2,
            eps,
        }
    }

    /// Applies one bias-corrected Adam update in place.
    ///
    /// A parameter whose gradient contains a non-finite value is left untouched
    /// (moments included); the step counter still advances.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[&Tensor], lr: f64) -> Result<StepReport> {
        if !(lr > 0.0) || !lr.is_finite() {
            return Err(Error::InvalidArgument(format!("learning rate must be positive, got {lr}")));
        }
        if params.len() != grads.len() || params.len() != self.first_moment.len() {
            return shape_err(
                "adam_step",
                format!(
                    "{} params, {} grads, {} accumulators",
                    params.len(),
                    grads.len(),
                    self.first_moment.len()
                ),
            );
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.shape() != self.first_moment[i].shape() {
                return shape_err(
                    "adam_step",
                    format!("param {i}: {:?} vs grad {:?}", p.shape(), g.shape()),
                );
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let mut report = StepReport::default();
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if !g.all_finite() {
                log::warn!("adam: non-finite gradient for parameter {i}; update skipped");
                report.skipped.push(i);
                continue;
            }
            let m = self.first_moment[i].data_mut();
            let v = self.second_moment[i].data_mut();
            for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(report)
    }
}
