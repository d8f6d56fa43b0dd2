//! Step-size sequences and their Robbins-Monro classification.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ScheduleError {
    #[error("first step {0} lies outside (0, 1]")]
    FirstStepOutOfRange(f64),
    #[error("harmonic offset must be at least 1")]
    ZeroOffset,
    #[error("power exponent {0} outside (0.5, 1]")]
    ExponentOutOfRange(f64),
    #[error("invalid schedule parameter: {0}")]
    InvalidParameter(String),
}

/// A step-size family `{γ_ρ}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Schedule {
    /// `γ_ρ = 1 / (ρ + offset)`
    Harmonic { offset: u64 },
    /// `γ_ρ = θ / (ρ + 1)^β`
    Power { theta: f64, beta: f64 },
    /// `γ_ρ = γ`
    Constant { gamma: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RobbinsMonro {
    Satisfies,
    ViolatesDivergentSum,
    ViolatesSquareSummability,
}

impl RobbinsMonro {
    pub fn holds(self) -> bool {
        self == RobbinsMonro::Satisfies
    }
}

impl Schedule {
    pub fn harmonic(offset: u64) -> Result<Self, ScheduleError> {
        let s = Schedule::Harmonic { offset };
        s.validate()?;
        Ok(s)
    }

    /// Power decay with `β ∈ (0.5, 1]`.
    pub fn power(theta: f64, beta: f64) -> Result<Self, ScheduleError> {
        if !(beta > 0.5 && beta <= 1.0) {
            return Err(ScheduleError::ExponentOutOfRange(beta));
        }
        Self::power_any_exponent(theta, beta)
    }

    /// Power decay with any positive exponent. Outside `(0.5, 1]` the schedule breaks
    /// the Robbins-Monro conditions, which [`classify_robbins_monro`] reports.
    pub fn power_any_exponent(theta: f64, beta: f64) -> Result<Self, ScheduleError> {
        let s = Schedule::Power { theta, beta };
        s.validate()?;
        Ok(s)
    }

    pub fn constant(gamma: f64) -> Result<Self, ScheduleError> {
        let s = Schedule::Constant { gamma };
        s.validate()?;
        Ok(s)
    }

    /// Checks parameters and that `γ₀ ∈ (0, 1]`; every family here is nonincreasing,
    /// so all later steps stay in range too.
    pub fn validate(&self) -> Result<(), ScheduleError> {
        match *self {
            Schedule::Harmonic { offset: 0 } => return Err(ScheduleError::ZeroOffset),
            Schedule::Power { theta, beta } => {
                if !(beta > 0.0 && beta.is_finite()) {
                    return Err(ScheduleError::InvalidParameter(format!("beta = {beta}")));
                }
                if !theta.is_finite() {
                    return Err(ScheduleError::InvalidParameter(format!("theta = {theta}")));
                }
            }
            _ => {}
        }
        let first = self.step_at(0);
        if !(first > 0.0 && first <= 1.0) {
            return Err(ScheduleError::FirstStepOutOfRange(first));
        }
        Ok(())
    }

    pub fn step_at(&self, rho: usize) -> f64 {
        match *self {
            Schedule::Harmonic { offset } => 1.0 / (rho as f64 + offset as f64),
            Schedule::Power { theta, beta } => theta / (rho as f64 + 1.0).powf(beta),
            Schedule::Constant { gamma } => gamma,
        }
    }

    pub fn constant_step(&self) -> Option<f64> {
        match *self {
            Schedule::Constant { gamma } => Some(gamma),
            _ => None,
        }
    }

    /// `min_{ρ < n} γ_ρ`, i.e. the last step of a nonincreasing sequence.
    pub fn min_step(&self, n: usize) -> f64 {
        self.step_at(n.saturating_sub(1))
    }
}

pub fn step_at(s: &Schedule, rho: usize) -> f64 {
    s.step_at(rho)
}

/// Analytic verdict on `Σγ_ρ = ∞` and `Σγ_ρ² < ∞`.
pub fn classify_robbins_monro(s: &Schedule) -> RobbinsMonro {
    match *s {
        Schedule::Harmonic { .. } => RobbinsMonro::Satisfies,
        Schedule::Constant { .. } => RobbinsMonro::ViolatesSquareSummability,
        Schedule::Power { beta, .. } if beta > 1.0 => RobbinsMonro::ViolatesDivergentSum,
        Schedule::Power { beta, .. } if beta <= 0.5 => RobbinsMonro::ViolatesSquareSummability,
        Schedule::Power { .. } => RobbinsMonro::Satisfies,
    }
}

/// Strong-convergence step cap `2μ / L²`.
pub fn max_stable_step(mu: f64, lipschitz: f64) -> Result<f64, ScheduleError> {
    if !(mu > 0.0 && lipschitz > 0.0 && mu.is_finite() && lipschitz.is_finite()) {
        return Err(ScheduleError::InvalidParameter(format!(
            "need mu > 0 and L > 0, got mu = {mu}, L = {lipschitz}"
        )));
    }
    if mu > lipschitz * (1.0 + 1e-12) {
        return Err(ScheduleError::InvalidParameter(format!("mu = {mu} exceeds L = {lipschitz}")));
    }
    Ok(2.0 * mu / (lipschitz * lipschitz))
}

/// `min(2μ₁/L₁², 2μ₂/L₂²)` for coupled problems.
pub fn coupled_max_step(mu1: f64, l1: f64, mu2: f64, l2: f64) -> Result<f64, ScheduleError> {
    Ok(max_stable_step(mu1, l1)?.min(max_stable_step(mu2, l2)?))
}
