//! Iteration-complexity bounds, error budgets, and empirical rate diagnostics.
//!
//! Logarithms are natural throughout; the bounds are ratios of logs, so the base cancels.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::Vector;
use crate::operators::{RngState, StochasticOp};
use crate::schedules::Schedule;
use crate::solvers::{self, ResolventMode, SolverError, SolverReport, StopRule};

/// Environment variable capping the worker count of [`mc_expected_residual`].
pub const THREADS_ENV: &str = "INCLUSIONKIT_THREADS";

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AnalysisError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("outside the bound's domain: {0}")]
    Domain(String),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error(transparent)]
    Solver(#[from] SolverError),
}

pub type Result<T> = std::result::Result<T, AnalysisError>;

fn positive(name: &str, x: f64) -> Result<()> {
    if x > 0.0 && x.is_finite() {
        Ok(())
    } else {
        Err(AnalysisError::InvalidInput(format!("{name} must be positive and finite, got {x}")))
    }
}

fn ceil_count(q: f64) -> Result<u64> {
    if !q.is_finite() || q < 0.0 || q.ceil() >= u64::MAX as f64 {
        return Err(AnalysisError::Domain(format!("quotient {q} is not a finite count")));
    }
    Ok(q.ceil() as u64)
}

/// Smallest `K` with `K ≥ ln(r0²/ε²) / ln(1 + 2μγ/L²)`; zero once `r0² ≤ ε²`.
pub fn iteration_bound_strong(r0_sq: f64, mu: f64, lipschitz: f64, gamma: f64, eps: f64) -> Result<u64> {
    for (n, x) in [("r0_sq", r0_sq), ("mu", mu), ("L", lipschitz), ("gamma", gamma), ("eps", eps)] {
        positive(n, x)?;
    }
    let cap = 2.0 * mu / (lipschitz * lipschitz);
    if gamma > cap * (1.0 + 1e-12) {
        return Err(AnalysisError::Domain(format!("gamma = {gamma} exceeds 2μ/L² = {cap}")));
    }
    if r0_sq <= eps * eps {
        return Ok(0);
    }
    let num = r0_sq.ln() - 2.0 * eps.ln();
    let den = (2.0 * mu * gamma / (lipschitz * lipschitz)).ln_1p();
    ceil_count(num / den)
}

/// Smallest `K` with `K ≥ ln(R₀/ε) / ln(1/(1 − cγ))`, `c = min(μ₁, μ₂)`; zero once `R₀ ≤ ε`.
pub fn iteration_bound_coupled(r0_sq: f64, mu1: f64, mu2: f64, gamma: f64, eps: f64) -> Result<u64> {
    positive("r0_sq", r0_sq)?;
    positive("eps", eps)?;
    let cg = mu1.min(mu2) * gamma;
    if !(cg > 0.0 && cg < 1.0) {
        return Err(AnalysisError::Domain(format!("need 0 < min(μ₁, μ₂)·γ < 1, got {cg}")));
    }
    if r0_sq <= eps {
        return Ok(0);
    }
    ceil_count((r0_sq.ln() - eps.ln()) / -(-cg).ln_1p())
}

/// `K ≥ C/ε²` with a caller-supplied constant `C`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StochasticComplexity {
    pub c: f64,
}

impl StochasticComplexity {
    pub fn new(c: f64) -> Result<Self> {
        positive("C", c)?;
        Ok(Self { c })
    }

    pub fn iterations(&self, eps: f64) -> Result<u64> {
        positive("eps", eps)?;
        ceil_count(self.c / (eps * eps))
    }
}

pub fn stochastic_iteration_bound(c: f64, eps: f64) -> Result<u64> {
    StochasticComplexity::new(c)?.iterations(eps)
}

/// Components of `C(Δι + √Var + 1/√ρ)`. `C` defaults to 1; it is a diagnostic weight,
/// not a certified constant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorBudget {
    pub c: f64,
    pub delta_iota: f64,
    pub variance: f64,
    pub rho: u64,
}

impl ErrorBudget {
    pub fn new(c: f64, delta_iota: f64, variance: f64, rho: u64) -> Result<Self> {
        let b = Self { c, delta_iota, variance, rho };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        positive("C", self.c)?;
        for (n, x) in [("delta_iota", self.delta_iota), ("variance", self.variance)] {
            if !(x >= 0.0 && x.is_finite()) {
                return Err(AnalysisError::InvalidInput(format!("{n} must be nonnegative, got {x}")));
            }
        }
        if self.rho == 0 {
            return Err(AnalysisError::InvalidInput("rho must be >= 1".into()));
        }
        Ok(())
    }

    /// `(C·Δι, C·√Var, C/√ρ)`.
    pub fn terms(&self) -> (f64, f64, f64) {
        (self.c * self.delta_iota, self.c * self.variance.sqrt(), self.c / (self.rho as f64).sqrt())
    }
}

pub fn total_error_bound(budget: &ErrorBudget) -> Result<f64> {
    budget.validate()?;
    let (d, v, r) = budget.terms();
    Ok(d + v + r)
}

/// `L_ι·|ι − ι_ρ|`.
pub fn discretization_error_bound(l_time: f64, iota: f64, iota_rho: f64) -> Result<f64> {
    if !(l_time >= 0.0 && l_time.is_finite()) {
        return Err(AnalysisError::InvalidInput(format!("L_time must be nonnegative, got {l_time}")));
    }
    Ok(l_time * (iota - iota_rho).abs())
}

/// Largest `Δι` with `L_ι·Δι ≤ ε`; unbounded when the operator does not depend on time.
pub fn admissible_time_step(l_time: f64, eps: f64) -> Result<f64> {
    positive("eps", eps)?;
    if !(l_time >= 0.0 && l_time.is_finite()) {
        return Err(AnalysisError::InvalidInput(format!("L_time must be nonnegative, got {l_time}")));
    }
    Ok(if l_time == 0.0 { f64::INFINITY } else { eps / l_time })
}

/// `exp` of the least-squares slope of `ln e_k` against `k`.
pub fn contraction_from_errors(points: &[(f64, f64)]) -> Result<f64> {
    let pts: Vec<(f64, f64)> = points.iter().filter(|(_, e)| *e > 0.0 && e.is_finite()).map(|&(k, e)| (k, e.ln())).collect();
    if pts.len() < 5 {
        return Err(AnalysisError::InsufficientData(format!(
            "need at least 5 positive errors, have {}",
            pts.len()
        )));
    }
    let n = pts.len() as f64;
    let mk = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let ml = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|(k, l)| (k - mk) * (l - ml)).sum();
    let sxx: f64 = pts.iter().map(|(k, _)| (k - mk) * (k - mk)).sum();
    Ok((sxy / sxx).exp())
}

/// Empirical per-iteration contraction of `‖ζ_ρ − ζ*‖` over a run.
pub fn empirical_contraction(report: &SolverReport, reference: &Vector) -> Result<f64> {
    let mut pts = Vec::with_capacity(report.records.len());
    for r in &report.records {
        let e = r.iterate.distance(reference).map_err(|e| AnalysisError::InvalidInput(e.to_string()))?;
        pts.push(((r.rho + 1) as f64, e));
    }
    contraction_from_errors(&pts)
}

/// One point of a Monte Carlo curve; `k` counts iterates, `k = 0` is the start.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McPoint {
    pub k: usize,
    pub mean_sq_error: f64,
    /// `None` for a single replication.
    pub standard_error: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McCurve {
    pub n_seeds: usize,
    pub base_seed: u64,
    pub reference: Vector,
    pub points: Vec<McPoint>,
}

fn worker_count() -> Option<usize> {
    std::env::var(THREADS_ENV).ok()?.trim().parse::<usize>().ok().filter(|&n| n > 0)
}

/// Squared error of each iterate; runs that stop early hold their final iterate.
fn squared_error_path(report: &SolverReport, z0: &Vector, zstar: &Vector, len: usize) -> Result<Vec<f64>> {
    let sq = |v: &Vector| v.distance(zstar).map(|d| d * d).map_err(|e| AnalysisError::InvalidInput(e.to_string()));
    let mut path = Vec::with_capacity(len);
    path.push(sq(z0)?);
    for r in &report.records {
        path.push(sq(&r.iterate)?);
    }
    let last = *path.last().unwrap();
    path.resize(len, last);
    Ok(path)
}

/// Pointwise mean over seeds `base_seed + i` of `‖ζ_k − ζ*‖²`, with its standard error.
pub fn mc_expected_residual(
    op: &StochasticOp,
    z0: &Vector,
    s: &Schedule,
    stop: &StopRule,
    n_seeds: usize,
    base_seed: u64,
    mode: ResolventMode,
) -> Result<McCurve> {
    if n_seeds == 0 {
        return Err(AnalysisError::InvalidInput("n_seeds must be >= 1".into()));
    }
    let zstar = op
        .mean_operator()
        .as_affine()
        .ok_or_else(|| AnalysisError::InvalidInput("mean operator has no closed-form zero".into()))?
        .zero()
        .map_err(|e| AnalysisError::InvalidInput(format!("mean operator zero: {e}")))?;
    let len = stop.max_iters + 1;
    let run = |i: usize| -> Result<Vec<f64>> {
        let rng = RngState::new(base_seed.wrapping_add(i as u64));
        let report = solvers::solve_stochastic(op, z0, s, stop, rng, mode)?;
        squared_error_path(&report, z0, &zstar, len)
    };
    let paths: Vec<Vec<f64>> = {
        let mut builder = rayon::ThreadPoolBuilder::new();
        if let Some(n) = worker_count() {
            builder = builder.num_threads(n);
        }
        let pool = builder.build().map_err(|e| AnalysisError::InvalidInput(format!("thread pool: {e}")))?;
        pool.install(|| (0..n_seeds).into_par_iter().map(run).collect::<Result<Vec<_>>>())?
    };
    let n = n_seeds as f64;
    let points = (0..len)
        .map(|k| {
            let mean = paths.iter().map(|p| p[k]).sum::<f64>() / n;
            let standard_error = (n_seeds > 1).then(|| {
                let var = paths.iter().map(|p| (p[k] - mean).powi(2)).sum::<f64>() / (n - 1.0);
                (var / n).sqrt()
            });
            McPoint { k, mean_sq_error: mean, standard_error }
        })
        .collect();
    Ok(McCurve { n_seeds, base_seed, reference: zstar, points })
}
