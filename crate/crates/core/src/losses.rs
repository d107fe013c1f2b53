//! Classification loss plus the rate surrogate on the compression kernels.

use serde::{Deserialize, Serialize};

use crate::engine::{Tape, Var};
use crate::error::{Error, Result};
use crate::jpeg::diff::KernelVars;
use crate::jpeg::CompressionKernels;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PenaltyKind {
    /// `Σ max(q² − c, 0) + λ₁ |q|`
    #[default]
    HingeL1,
    /// `Σ q²`
    PureL2,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub lambda: f64,
    pub lambda1: f64,
    pub c: f64,
    pub penalty: PenaltyKind,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { lambda: 0.001, lambda1: 1.0, c: 10.0, penalty: PenaltyKind::HingeL1 }
    }
}

impl LossConfig {
    /// `c = 0.01 / λ`, `λ₁ = 1`.
    pub fn coupled(lambda: f64) -> Self {
        Self { lambda, lambda1: 1.0, c: 0.01 / lambda, penalty: PenaltyKind::HingeL1 }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda", self.lambda), ("lambda1", self.lambda1), ("c", self.c)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} = {v} must be finite and non-negative")));
            }
        }
        Ok(())
    }
}

/// Mean softmax cross-entropy.
pub fn cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    tape.softmax_cross_entropy(logits, labels)
}

fn per_kernel(tape: &mut Tape, kernels: &KernelVars, mut f: impl FnMut(&mut Tape, Var) -> Result<Var>) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for &q in &kernels.q {
        let term = f(tape, q)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, term)?,
            None => term,
        });
    }
    Ok(acc.expect("three kernels"))
}

/// Hinge on `q²` plus an ℓ1 term; both subgradients are 0 at their kinks.
pub fn quan_penalty_hinge_l1(tape: &mut Tape, kernels: &KernelVars, cfg: &LossConfig) -> Result<Var> {
    per_kernel(tape, kernels, |t, q| {
        let sq = t.square(q);
        let above = t.max_const(sq, cfg.c);
        let hinge = t.add_const(above, -cfg.c)?;
        let abs = t.abs(q);
        let l1 = t.mul_scalar(abs, cfg.lambda1);
        let sum = t.add(hinge, l1)?;
        Ok(t.sum(sum))
    })
}

pub fn quan_penalty_l2(tape: &mut Tape, kernels: &KernelVars) -> Result<Var> {
    per_kernel(tape, kernels, |t, q| {
        let sq = t.square(q);
        Ok(t.sum(sq))
    })
}

pub fn quan_penalty(tape: &mut Tape, kernels: &KernelVars, cfg: &LossConfig) -> Result<Var> {
    match cfg.penalty {
        PenaltyKind::HingeL1 => quan_penalty_hinge_l1(tape, kernels, cfg),
        PenaltyKind::PureL2 => quan_penalty_l2(tape, kernels),
    }
}

/// `cla + λ · quan`.
pub fn total_loss(tape: &mut Tape, cla: Var, quan: Var, cfg: &LossConfig) -> Result<Var> {
    let scaled = tape.mul_scalar(quan, cfg.lambda);
    tape.add(cla, scaled)
}

/// The penalty evaluated directly on kernel values.
pub fn penalty_value(kernels: &CompressionKernels, cfg: &LossConfig) -> f64 {
    kernels
        .iter()
        .map(|q| match cfg.penalty {
            PenaltyKind::HingeL1 => (q * q - cfg.c).max(0.0) + cfg.lambda1 * q.abs(),
            PenaltyKind::PureL2 => q * q,
        })
        .sum()
}
