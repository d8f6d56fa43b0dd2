//! The three resolvent iterations: dynamic, stochastic, and coupled.
//!
//! Each iteration applies a forward step followed by the resolvent of the same
//! operator, `ζ ← J_γ^T(ζ − γT(ζ))`. Fixed points of that composed map are exactly
//! the zeros of `T`, since `ζ = J(ζ − γT(ζ))` reduces to `2γT(ζ) = 0`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{LinalgError, Vector};
use crate::operators::{
    CoupledPair, DynamicOp, OperatorError, RngState, StaticOp, StochasticOp, RNG_ALGORITHM,
};
use crate::resolvents::{self, ResolventError};
use crate::schedules::{self, classify_robbins_monro, RobbinsMonro, Schedule};

/// Iterates whose norm exceeds this are declared divergent.
pub const DIVERGENCE_NORM: f64 = 1e12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SolverError {
    #[error("invalid stop rule: {0}")]
    InvalidStop(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("resolvent failed at iteration {rho}: {source}")]
    Resolvent { rho: usize, source: ResolventError },
    #[error("operator evaluation failed at iteration {rho}: {source}")]
    Operator { rho: usize, source: OperatorError },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

pub type Result<T> = std::result::Result<T, SolverError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StopRule {
    pub epsilon: f64,
    pub max_iters: usize,
}

impl StopRule {
    pub fn new(epsilon: f64, max_iters: usize) -> Result<Self> {
        let s = Self { epsilon, max_iters };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(SolverError::InvalidStop(format!("epsilon must be > 0, got {}", self.epsilon)));
        }
        if self.max_iters == 0 {
            return Err(SolverError::InvalidStop("max_iters must be >= 1".into()));
        }
        Ok(())
    }
}

/// Which operator the resolvent uses in the stochastic iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResolventMode {
    /// Resolvent of the mean operator `T`; the forward step alone is sampled.
    #[default]
    Mean,
    /// Resolvent of the same realization `T_ξ` used in the forward step.
    Sampled,
}

/// Outcome of iteration `rho`: the record holds `ζ_{ρ+1}` computed with `γ_ρ` at `ι_ρ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub rho: usize,
    pub iota: Option<f64>,
    pub gamma: f64,
    pub iterate: Vector,
    pub partner: Option<Vector>,
    /// `‖ζ_{ρ+1} − ζ_ρ‖`, or for coupled runs `‖ζ_{ρ+1} − ζ_ρ‖ + ‖ς_{ρ+1} − ς_ρ‖`.
    pub step_residual: f64,
    /// Coupled runs: the two step norms separately.
    pub split_steps: Option<(f64, f64)>,
    /// Coupled runs with a known joint zero: `‖ζ − ζ*‖² + ‖ς − ς*‖²`.
    pub combined_residual: Option<f64>,
    /// `‖ζ − ζ*‖`, or `‖ζ − ζ*‖ + ‖ς − ς*‖` for coupled runs.
    pub error_to_reference: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Converged,
    MaxItersReached,
    Diverged,
}

/// Inputs of a solve, echoed verbatim into its report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveEcho {
    pub algorithm: String,
    pub schedule: Schedule,
    pub stop: StopRule,
    pub initial: Vector,
    pub initial_partner: Option<Vector>,
    pub resolvent_mode: Option<ResolventMode>,
    pub robbins_monro: RobbinsMonro,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverReport {
    pub records: Vec<IterationRecord>,
    pub verdict: Verdict,
    pub final_iterate: Vector,
    pub final_partner: Option<Vector>,
    pub seed: Option<u64>,
    pub rng_algorithm: Option<String>,
    pub echo: SolveEcho,
    pub warnings: Vec<String>,
}

impl SolverReport {
    pub fn iterations(&self) -> usize {
        self.records.len()
    }

    pub fn last(&self) -> Option<&IterationRecord> {
        self.records.last()
    }
}

fn is_nonfinite_op(e: &OperatorError) -> bool {
    matches!(e, OperatorError::Linalg(LinalgError::NonFinite))
}

fn is_nonfinite_resolvent(e: &ResolventError) -> bool {
    match e {
        ResolventError::Operator(op) => is_nonfinite_op(op),
        _ => false,
    }
}

/// Result of one composed update; `None` means the update overflowed.
enum Step {
    Finite(Vector),
    Overflow,
}

fn composed_update(op: &StaticOp, forward_op: &StaticOp, gamma: f64, z: &Vector, rho: usize) -> Result<Step> {
    let t = match forward_op.eval(z) {
        Ok(t) => t,
        Err(e) if is_nonfinite_op(&e) => return Ok(Step::Overflow),
        Err(source) => return Err(SolverError::Operator { rho, source }),
    };
    let forward = match z.axpy(-gamma, &t) {
        Ok(f) => f,
        Err(LinalgError::NonFinite) => return Ok(Step::Overflow),
        Err(e) => return Err(e.into()),
    };
    match resolvents::resolve(op, gamma, &forward) {
        Ok(x) => Ok(Step::Finite(x)),
        Err(e) if is_nonfinite_resolvent(&e) => Ok(Step::Overflow),
        Err(source) => Err(SolverError::Resolvent { rho, source }),
    }
}

fn diverging(v: &Vector) -> bool {
    v.norm2() > DIVERGENCE_NORM
}

fn check_dim(expected: usize, v: &Vector) -> Result<()> {
    if v.dim() != expected {
        return Err(LinalgError::DimensionMismatch { expected, found: v.dim() }.into());
    }
    Ok(())
}

fn schedule_warnings(s: &Schedule) -> (RobbinsMonro, Vec<String>) {
    let rm = classify_robbins_monro(s);
    let mut warnings = Vec::new();
    if !rm.holds() {
        warnings.push(format!(
            "schedule {s:?} does not meet the Robbins-Monro conditions ({rm:?}); \
             weak-convergence hypotheses are not satisfied"
        ));
    }
    (rm, warnings)
}

/// Resolvent iteration for a time-varying operator on its grid:
/// `ζ_{ρ+1} = J_{γ_ρ}^{T(·,ι_ρ)}(ζ_ρ − γ_ρ T(ζ_ρ, ι_ρ))`.
pub fn solve_dynamic(op: &DynamicOp, z0: &Vector, s: &Schedule, stop: &StopRule) -> Result<SolverReport> {
    stop.validate()?;
    s.validate().map_err(|e| SolverError::Precondition(e.to_string()))?;
    check_dim(op.dim(), z0)?;
    if stop.max_iters > op.grid().count {
        return Err(SolverError::Precondition(format!(
            "time grid has {} points but max_iters is {}",
            op.grid().count,
            stop.max_iters
        )));
    }
    let (rm, warnings) = schedule_warnings(s);
    let mut z = z0.clone();
    let mut records = Vec::new();
    let mut verdict = Verdict::MaxItersReached;
    for rho in 0..stop.max_iters {
        let iota = op.grid().time_at(rho);
        let gamma = s.step_at(rho);
        let frozen = op.freeze(iota).map_err(|source| SolverError::Operator { rho, source })?;
        let next = match composed_update(&frozen, &frozen, gamma, &z, rho)? {
            Step::Finite(x) => x,
            Step::Overflow => {
                verdict = Verdict::Diverged;
                break;
            }
        };
        let step = next.distance(&z)?;
        let error = op.instantaneous_zero(iota).map(|r| next.distance(&r)).transpose()?;
        records.push(IterationRecord {
            rho,
            iota: Some(iota),
            gamma,
            iterate: next.clone(),
            partner: None,
            step_residual: step,
            split_steps: None,
            combined_residual: None,
            error_to_reference: error,
        });
        let blown = diverging(&next);
        z = next;
        if blown {
            verdict = Verdict::Diverged;
            break;
        }
        if step < stop.epsilon {
            verdict = Verdict::Converged;
            break;
        }
    }
    Ok(SolverReport {
        records,
        verdict,
        final_iterate: z,
        final_partner: None,
        seed: None,
        rng_algorithm: None,
        echo: SolveEcho {
            algorithm: "dynamic".into(),
            schedule: *s,
            stop: *stop,
            initial: z0.clone(),
            initial_partner: None,
            resolvent_mode: None,
            robbins_monro: rm,
        },
        warnings,
    })
}

/// Resolvent iteration with a fresh realization in every forward step:
/// `ζ_{ρ+1} = J_{γ_ρ}^{T}(ζ_ρ − γ_ρ T_{ξ_ρ}(ζ_ρ))`.
pub fn solve_stochastic(
    op: &StochasticOp,
    z0: &Vector,
    s: &Schedule,
    stop: &StopRule,
    rng: RngState,
    mode: ResolventMode,
) -> Result<SolverReport> {
    stop.validate()?;
    s.validate().map_err(|e| SolverError::Precondition(e.to_string()))?;
    check_dim(op.dim(), z0)?;
    let (rm, warnings) = schedule_warnings(s);
    let mean = op.mean_operator();
    let reference = mean.as_affine().and_then(|m| m.zero().ok());
    let mut rng = rng;
    let mut z = z0.clone();
    let mut records = Vec::new();
    let mut verdict = Verdict::MaxItersReached;
    for rho in 0..stop.max_iters {
        let gamma = s.step_at(rho);
        let (realized, next_rng) = op.sample(rng).map_err(|source| SolverError::Operator { rho, source })?;
        rng = next_rng;
        let resolvent_op = match mode {
            ResolventMode::Mean => mean,
            ResolventMode::Sampled => &realized,
        };
        let next = match composed_update(resolvent_op, &realized, gamma, &z, rho)? {
            Step::Finite(x) => x,
            Step::Overflow => {
                verdict = Verdict::Diverged;
                break;
            }
        };
        let step = next.distance(&z)?;
        let error = reference.as_ref().map(|r| next.distance(r)).transpose()?;
        records.push(IterationRecord {
            rho,
            iota: None,
            gamma,
            iterate: next.clone(),
            partner: None,
            step_residual: step,
            split_steps: None,
            combined_residual: None,
            error_to_reference: error,
        });
        let blown = diverging(&next);
        z = next;
        if blown {
            verdict = Verdict::Diverged;
            break;
        }
        if step < stop.epsilon {
            verdict = Verdict::Converged;
            break;
        }
    }
    Ok(SolverReport {
        records,
        verdict,
        final_iterate: z,
        final_partner: None,
        seed: Some(rng.seed),
        rng_algorithm: Some(RNG_ALGORITHM.into()),
        echo: SolveEcho {
            algorithm: "stochastic".into(),
            schedule: *s,
            stop: *stop,
            initial: z0.clone(),
            initial_partner: None,
            resolvent_mode: Some(mode),
            robbins_monro: rm,
        },
        warnings,
    })
}

/// Gauss-Seidel coupled iteration: `ζ` is updated from `(ζ_ρ, ς_ρ)`, then `ς` from
/// `(ς_ρ, ζ_{ρ+1})`. Stops when the sum of both step norms drops below `ε`.
pub fn solve_coupled(
    pair: &CoupledPair,
    z0: &Vector,
    w0: &Vector,
    s: &Schedule,
    stop: &StopRule,
) -> Result<SolverReport> {
    stop.validate()?;
    s.validate().map_err(|e| SolverError::Precondition(e.to_string()))?;
    let (n, m) = pair.dims();
    check_dim(n, z0)?;
    check_dim(m, w0)?;
    if let Some(gamma) = s.constant_step() {
        let (m1, m2) = pair.meta();
        let cap = schedules::coupled_max_step(m1.mu, m1.lipschitz, m2.mu, m2.lipschitz)
            .map_err(|e| SolverError::Precondition(format!("coupled step cap undefined: {e}")))?;
        if gamma > cap * (1.0 + 1e-12) {
            return Err(SolverError::Precondition(format!(
                "constant step {gamma} exceeds min(2μ₁/L₁², 2μ₂/L₂²) = {cap}"
            )));
        }
    }
    let (rm, warnings) = schedule_warnings(s);
    let reference = pair.joint_zero();
    let (mut z, mut w) = (z0.clone(), w0.clone());
    let mut records = Vec::new();
    let mut verdict = Verdict::MaxItersReached;
    for rho in 0..stop.max_iters {
        let gamma = s.step_at(rho);
        let t1 = pair.freeze_t1(&w).map_err(|source| SolverError::Operator { rho, source })?;
        let z_next = match composed_update(&t1, &t1, gamma, &z, rho)? {
            Step::Finite(x) => x,
            Step::Overflow => {
                verdict = Verdict::Diverged;
                break;
            }
        };
        let t2 = pair.freeze_t2(&z_next).map_err(|source| SolverError::Operator { rho, source })?;
        let w_next = match composed_update(&t2, &t2, gamma, &w, rho)? {
            Step::Finite(x) => x,
            Step::Overflow => {
                verdict = Verdict::Diverged;
                break;
            }
        };
        let dz = z_next.distance(&z)?;
        let dw = w_next.distance(&w)?;
        let (combined, error) = match &reference {
            Some((zs, ws)) => {
                let (ez, ew) = (z_next.distance(zs)?, w_next.distance(ws)?);
                (Some(ez * ez + ew * ew), Some(ez + ew))
            }
            None => (None, None),
        };
        records.push(IterationRecord {
            rho,
            iota: None,
            gamma,
            iterate: z_next.clone(),
            partner: Some(w_next.clone()),
            step_residual: dz + dw,
            split_steps: Some((dz, dw)),
            combined_residual: combined,
            error_to_reference: error,
        });
        let blown = diverging(&z_next) || diverging(&w_next);
        z = z_next;
        w = w_next;
        if blown {
            verdict = Verdict::Diverged;
            break;
        }
        if dz + dw < stop.epsilon {
            verdict = Verdict::Converged;
            break;
        }
    }
    Ok(SolverReport {
        records,
        verdict,
        final_iterate: z,
        final_partner: Some(w),
        seed: None,
        rng_algorithm: None,
        echo: SolveEcho {
            algorithm: "coupled".into(),
            schedule: *s,
            stop: *stop,
            initial: z0.clone(),
            initial_partner: Some(w0.clone()),
            resolvent_mode: None,
            robbins_monro: rm,
        },
        warnings,
    })
}
