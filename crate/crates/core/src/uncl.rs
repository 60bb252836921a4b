//! Uncertainty-aware consistency loss.
//!
//! Per voxel `i` the squared error between student and teacher class
//! probabilities is divided by `exp(β·H_s) + exp(β·H_t)` and an entropy
//! regularizer `β·(H_s + H_t)` is added; both terms are averaged over all
//! voxels of the batch. The teacher is a constant target, so gradients flow
//! only into the student probabilities.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields::ProbabilityField;
use crate::uncertainty::{entropy_of, entropy_partial};

/// How β is chosen over training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", content = "value", rename_all = "snake_case")]
pub enum BetaMode {
    /// No uncertainty scaling: β = 0, which turns the denominator into 2 and
    /// removes the regularizer.
    None,
    Fixed(f64),
    Adaptive,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BetaSchedule {
    pub beta_max: f64,
    pub beta_min: f64,
    /// Decay rate λ.
    pub decay: f64,
    pub total_epochs: usize,
    pub mode: BetaMode,
}

impl Default for BetaSchedule {
    fn default() -> Self {
        Self {
            beta_max: 1.0,
            beta_min: 0.1,
            decay: 0.1,
            total_epochs: 100,
            mode: BetaMode::Adaptive,
        }
    }
}

impl BetaSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta_min > 0.0 && self.beta_min <= self.beta_max) {
            return Err(Error::param(format!(
                "need 0 < beta_min <= beta_max, got {} and {}",
                self.beta_min, self.beta_max
            )));
        }
        if !(self.decay >= 0.0) {
            return Err(Error::param("decay rate must be non-negative"));
        }
        if self.total_epochs < 1 {
            return Err(Error::param("total_epochs must be at least 1"));
        }
        if let BetaMode::Fixed(b) = self.mode {
            if !(b >= 0.0) || !b.is_finite() {
                return Err(Error::param(format!("fixed beta must be >= 0, got {b}")));
            }
        }
        Ok(())
    }

    /// β at epoch `t`, `0 <= t <= total_epochs`.
    pub fn beta_at(&self, t: usize) -> Result<f64> {
        self.validate()?;
        if t > self.total_epochs {
            return Err(Error::param(format!(
                "epoch {t} outside schedule of {} epochs",
                self.total_epochs
            )));
        }
        Ok(match self.mode {
            BetaMode::None => 0.0,
            BetaMode::Fixed(b) => b,
            BetaMode::Adaptive => {
                let frac = t as f64 / self.total_epochs as f64;
                self.beta_min.max(self.beta_max * (-self.decay * frac).exp())
            }
        })
    }
}

/// Which model entropies enter the weighting and the regularizer. A disabled
/// side contributes `H = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntropyMode {
    #[default]
    Dual,
    StudentOnly,
    TeacherOnly,
}

impl EntropyMode {
    fn uses_student(self) -> bool {
        matches!(self, EntropyMode::Dual | EntropyMode::StudentOnly)
    }

    fn uses_teacher(self) -> bool {
        matches!(self, EntropyMode::Dual | EntropyMode::TeacherOnly)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnclResult {
    pub loss: f64,
    /// Gradient with respect to the student probabilities, laid out like them.
    pub grad_ps: Vec<f64>,
    /// Per-voxel weighted squared error (before the `1/N` average).
    pub per_voxel_consistency: Vec<f64>,
    /// Per-voxel `H_s + H_t` as used in the loss.
    pub per_voxel_entropy: Vec<f64>,
}

fn check_pair(p_s: &ProbabilityField, p_t: &ProbabilityField, beta: f64) -> Result<()> {
    if p_s.shape() != p_t.shape() {
        return Err(Error::contract(format!(
            "student shape {:?} differs from teacher shape {:?}",
            p_s.shape(),
            p_t.shape()
        )));
    }
    if !(beta >= 0.0) || !beta.is_finite() {
        return Err(Error::param(format!("beta must be >= 0, got {beta}")));
    }
    Ok(())
}

/// Loss, gradient and diagnostics in one pass.
pub fn uncl(
    p_s: &ProbabilityField,
    p_t: &ProbabilityField,
    beta: f64,
    mode: EntropyMode,
) -> Result<UnclResult> {
    check_pair(p_s, p_t, beta)?;
    let n = p_s.num_voxels();
    let classes = p_s.classes();
    let inv_n = 1.0 / n as f64;
    let mut grad = vec![0.0; p_s.data().len()];
    let mut consistency = Vec::with_capacity(n);
    let mut entropies = Vec::with_capacity(n);
    let mut weighted_sum = 0.0;
    let mut entropy_sum = 0.0;
    let (s_data, t_data) = (p_s.data(), p_t.data());
    let mut us = vec![0.0; classes];
    let mut ut = vec![0.0; classes];

    for v in 0..n {
        for c in 0..classes {
            let o = p_s.voxel_offset(v, c);
            us[c] = s_data[o];
            ut[c] = t_data[o];
        }
        let h_s = if mode.uses_student() { entropy_of(&us) } else { 0.0 };
        let h_t = if mode.uses_teacher() { entropy_of(&ut) } else { 0.0 };
        let e_s = (beta * h_s).exp();
        let denom = e_s + (beta * h_t).exp();
        let sq: f64 = us.iter().zip(&ut).map(|(a, b)| (a - b) * (a - b)).sum();
        let weighted = sq / denom;
        weighted_sum += weighted;
        entropy_sum += h_s + h_t;
        consistency.push(weighted);
        entropies.push(h_s + h_t);

        for c in 0..classes {
            let dh = if mode.uses_student() { entropy_partial(us[c]) } else { 0.0 };
            let align = 2.0 * (us[c] - ut[c]) / denom;
            let damping = sq * beta * e_s * dh / (denom * denom);
            let regularizer = beta * dh;
            grad[p_s.voxel_offset(v, c)] = inv_n * (align - damping + regularizer);
        }
    }

    Ok(UnclResult {
        loss: inv_n * weighted_sum + beta * inv_n * entropy_sum,
        grad_ps: grad,
        per_voxel_consistency: consistency,
        per_voxel_entropy: entropies,
    })
}

/// Loss value with both entropies active.
pub fn uncl_forward(p_s: &ProbabilityField, p_t: &ProbabilityField, beta: f64) -> Result<f64> {
    uncl(p_s, p_t, beta, EntropyMode::Dual).map(|r| r.loss)
}

/// Gradient with respect to `p_s` with both entropies active.
pub fn uncl_grad(p_s: &ProbabilityField, p_t: &ProbabilityField, beta: f64) -> Result<Vec<f64>> {
    uncl(p_s, p_t, beta, EntropyMode::Dual).map(|r| r.grad_ps)
}
