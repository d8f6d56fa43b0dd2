//! Executes a configuration and writes its trace and summary.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use thiserror::Error;

use super::config::{ConfigError, ExperimentConfig, Problem};
use super::trace;
use crate::analysis::{self, AnalysisError, ErrorBudget, McCurve};
use crate::linalg::Vector;
use crate::operators::RngState;
use crate::schedules;
use crate::solvers::{self, SolveEcho, SolverError, SolverReport, Verdict};

pub const EXIT_CONVERGED: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_MAX_ITERS: i32 = 2;
pub const EXIT_DIVERGED: i32 = 3;

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("solver failed: {0}")]
    Solver(#[from] SolverError),
    #[error("analysis failed: {0}")]
    Analysis(#[from] AnalysisError),
    #[error("cannot write {path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("{0}")]
    Usage(String),
}

pub fn exit_code(v: Verdict) -> i32 {
    match v {
        Verdict::Converged => EXIT_CONVERGED,
        Verdict::MaxItersReached => EXIT_MAX_ITERS,
        Verdict::Diverged => EXIT_DIVERGED,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BudgetReport {
    pub c: f64,
    pub delta_iota: f64,
    pub variance: f64,
    pub rho: u64,
    pub discretization_term: f64,
    pub noise_term: f64,
    pub sampling_term: f64,
    pub total: f64,
}

/// Predictions from the analysis module; a field is `None` when its hypotheses fail.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundsReport {
    pub problem: String,
    pub epsilon: f64,
    pub mu: Vec<f64>,
    pub lipschitz: Vec<f64>,
    pub max_stable_step: Option<f64>,
    pub iteration_bound_strong: Option<u64>,
    pub iteration_bound_coupled: Option<u64>,
    pub stochastic_iterations: Option<u64>,
    pub time_lipschitz: Option<f64>,
    pub discretization_per_step: Option<f64>,
    pub admissible_time_step: Option<f64>,
    pub error_budget: BudgetReport,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub name: Option<String>,
    pub problem: String,
    pub verdict: Verdict,
    pub exit_code: i32,
    pub iterations: usize,
    /// First iterate count with `error_to_reference < ε`.
    pub iterations_to_epsilon: Option<usize>,
    pub final_step_residual: Option<f64>,
    pub final_combined_residual: Option<f64>,
    pub final_error_to_reference: Option<f64>,
    pub final_iterate: Vec<f64>,
    pub final_partner: Option<Vec<f64>>,
    pub seed: Option<u64>,
    pub rng_algorithm: Option<String>,
    pub lambda: Option<f64>,
    pub warnings: Vec<String>,
    pub wall_time_seconds: f64,
    pub bounds: BoundsReport,
    pub solver: SolveEcho,
    pub config: String,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub report: SolverReport,
    pub summary: Summary,
    pub exit_code: i32,
}

fn lambda_warning(cfg: &ExperimentConfig) -> Option<String> {
    cfg.lambda.map(|l| format!("lambda = {l} is accepted for completeness but no update uses it"))
}

/// Solves without touching the filesystem.
pub fn solve(cfg: &ExperimentConfig) -> Result<SolverReport, RunError> {
    let mut report = match cfg.build()? {
        Problem::Dynamic { op, initial } => solvers::solve_dynamic(&op, &initial, &cfg.schedule, &cfg.stop)?,
        Problem::Stochastic { op, initial, seed } => solvers::solve_stochastic(
            &op,
            &initial,
            &cfg.schedule,
            &cfg.stop,
            RngState::new(seed),
            cfg.resolvent_mode,
        )?,
        Problem::Coupled { pair, initial, partner } => {
            solvers::solve_coupled(&pair, &initial, &partner, &cfg.schedule, &cfg.stop)?
        }
    };
    if let Some(w) = lambda_warning(cfg) {
        report.warnings.push(w);
    }
    Ok(report)
}

fn sq_dist(a: &Vector, b: &Vector) -> f64 {
    a.distance(b).map(|d| d * d).unwrap_or(f64::INFINITY)
}

fn strong_bound(r0_sq: f64, mu: f64, l: f64, gamma: f64, eps: f64) -> Option<u64> {
    if r0_sq <= eps * eps {
        return Some(0);
    }
    analysis::iteration_bound_strong(r0_sq, mu, l, gamma, eps).ok()
}

pub fn bounds(cfg: &ExperimentConfig) -> Result<BoundsReport, RunError> {
    let eps = cfg.bound_epsilon();
    let gamma = cfg.schedule.constant_step();
    let mut notes = Vec::new();
    if gamma.is_none() {
        notes.push("linear-rate bounds need a constant step; none reported for decaying schedules".into());
    }
    let mut out = BoundsReport {
        problem: cfg.problem.kind().into(),
        epsilon: eps,
        mu: vec![],
        lipschitz: vec![],
        max_stable_step: None,
        iteration_bound_strong: None,
        iteration_bound_coupled: None,
        stochastic_iterations: None,
        time_lipschitz: None,
        discretization_per_step: None,
        admissible_time_step: None,
        error_budget: BudgetReport {
            c: cfg.budget_c,
            delta_iota: 0.0,
            variance: 0.0,
            rho: cfg.stop.max_iters as u64,
            discretization_term: 0.0,
            noise_term: 0.0,
            sampling_term: 0.0,
            total: 0.0,
        },
        notes,
    };
    let (mut delta_iota, mut variance) = (0.0, 0.0);
    match cfg.build()? {
        Problem::Dynamic { op, initial } => {
            let m = *op.meta();
            out.mu.push(m.mu);
            out.lipschitz.push(m.lipschitz);
            out.max_stable_step = schedules::max_stable_step(m.mu, m.lipschitz).ok();
            out.time_lipschitz = Some(m.time_lipschitz);
            let grid = *op.grid();
            delta_iota = grid.delta;
            out.discretization_per_step = Some(analysis::discretization_error_bound(
                m.time_lipschitz,
                grid.time_at(1),
                grid.time_at(0),
            )?);
            out.admissible_time_step = Some(analysis::admissible_time_step(m.time_lipschitz, eps)?);
            if let (Some(g), Some(z)) = (gamma, op.instantaneous_zero(grid.iota0)) {
                out.iteration_bound_strong = strong_bound(sq_dist(&initial, &z), m.mu, m.lipschitz, g, eps);
                out.notes.push("strong bound uses the envelope constants and the zero at the first grid time".into());
            }
        }
        Problem::Stochastic { op, initial, .. } => {
            let mean = op.mean_operator();
            let m = *mean.meta();
            out.mu.push(m.mu);
            out.lipschitz.push(m.lipschitz);
            out.max_stable_step = schedules::max_stable_step(m.mu, m.lipschitz).ok();
            if let Some(z) = mean.as_affine().and_then(|a| a.zero().ok()) {
                variance = op.variance_at(&z).map_err(|e| RunError::Usage(e.to_string()))?;
                if let Some(g) = gamma {
                    out.iteration_bound_strong = strong_bound(sq_dist(&initial, &z), m.mu, m.lipschitz, g, eps);
                    out.notes.push("strong bound applies to the mean operator only".into());
                }
            }
            out.stochastic_iterations = analysis::stochastic_iteration_bound(cfg.budget_c, eps).ok();
        }
        Problem::Coupled { pair, initial, partner } => {
            let (m1, m2) = pair.meta();
            out.mu = vec![m1.mu, m2.mu];
            out.lipschitz = vec![m1.lipschitz, m2.lipschitz];
            out.max_stable_step = schedules::coupled_max_step(m1.mu, m1.lipschitz, m2.mu, m2.lipschitz).ok();
            if let (Some(g), Some((zs, ws))) = (gamma, pair.joint_zero()) {
                let r0 = sq_dist(&initial, &zs) + sq_dist(&partner, &ws);
                out.iteration_bound_coupled = if r0 <= eps {
                    Some(0)
                } else {
                    analysis::iteration_bound_coupled(r0, m1.mu, m2.mu, g, eps).ok()
                };
            }
        }
    }
    let budget = ErrorBudget::new(cfg.budget_c, delta_iota, variance, cfg.stop.max_iters as u64)?;
    let (d, v, s) = budget.terms();
    out.error_budget = BudgetReport {
        c: budget.c,
        delta_iota,
        variance,
        rho: budget.rho,
        discretization_term: d,
        noise_term: v,
        sampling_term: s,
        total: analysis::total_error_bound(&budget)?,
    };
    Ok(out)
}

fn summarize(cfg: &ExperimentConfig, report: &SolverReport, wall: f64) -> Result<Summary, RunError> {
    let last = report.last();
    let iterations_to_epsilon = report
        .records
        .iter()
        .position(|r| r.error_to_reference.is_some_and(|e| e < cfg.bound_epsilon()))
        .map(|i| i + 1);
    Ok(Summary {
        name: cfg.name.clone(),
        problem: cfg.problem.kind().into(),
        verdict: report.verdict,
        exit_code: exit_code(report.verdict),
        iterations: report.iterations(),
        iterations_to_epsilon,
        final_step_residual: last.map(|r| r.step_residual),
        final_combined_residual: last.and_then(|r| r.combined_residual),
        final_error_to_reference: last.and_then(|r| r.error_to_reference),
        final_iterate: report.final_iterate.as_slice().to_vec(),
        final_partner: report.final_partner.as_ref().map(|p| p.as_slice().to_vec()),
        seed: report.seed,
        rng_algorithm: report.rng_algorithm.clone(),
        lambda: cfg.lambda,
        warnings: report.warnings.clone(),
        wall_time_seconds: wall,
        bounds: bounds(cfg)?,
        solver: report.echo.clone(),
        config: cfg.to_toml(),
    })
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> RunError {
    RunError::Io { path: path.to_path_buf(), message: e.to_string() }
}

pub fn summary_json(s: &Summary) -> String {
    let mut text = serde_json::to_string_pretty(s).expect("summary serializes");
    text.push('\n');
    text
}

/// Solves, then writes the trace and summary named in `cfg.outputs`.
pub fn run(cfg: &ExperimentConfig) -> Result<RunOutcome, RunError> {
    let start = Instant::now();
    let report = solve(cfg)?;
    let wall = start.elapsed().as_secs_f64();
    let summary = summarize(cfg, &report, wall)?;
    if let Some(p) = &cfg.outputs.trace {
        trace::emit_csv(&report, p).map_err(|e| io_err(p, e))?;
    }
    if let Some(p) = &cfg.outputs.summary {
        fs::write(p, summary_json(&summary)).map_err(|e| io_err(p, e))?;
    }
    let exit_code = summary.exit_code;
    Ok(RunOutcome { report, summary, exit_code })
}

/// Monte Carlo curve for a stochastic config; `seeds` overrides `cfg.n_seeds`.
pub fn monte_carlo(cfg: &ExperimentConfig, seeds: Option<usize>) -> Result<McCurve, RunError> {
    let Problem::Stochastic { op, initial, seed } = cfg.build()? else {
        return Err(RunError::Usage(format!("mc needs a stochastic problem, got {}", cfg.problem.kind())));
    };
    let n = seeds
        .or(cfg.n_seeds)
        .ok_or_else(|| RunError::Usage("number of seeds not given (use --seeds or n_seeds)".into()))?;
    Ok(analysis::mc_expected_residual(&op, &initial, &cfg.schedule, &cfg.stop, n, seed, cfg.resolvent_mode)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiment::presets::preset;

    #[test]
    fn coupled_preset_converges() {
        let out = run(&preset("coupled-svi").unwrap()).unwrap();
        assert_eq!(out.exit_code, EXIT_CONVERGED);
        assert!(out.summary.final_error_to_reference.unwrap() < 1e-6);
        assert!(out.summary.iterations <= 500);
        let b = out.summary.bounds.iteration_bound_coupled.unwrap();
        assert!(b > 0);
    }

    #[test]
    fn budget_exhaustion_exit_code() {
        let mut cfg = preset("coupled-svi").unwrap();
        cfg.stop.max_iters = 1;
        let out = run(&cfg).unwrap();
        assert_eq!(out.exit_code, EXIT_MAX_ITERS);
        assert_eq!(out.report.records.len(), 1);
    }

    #[test]
    fn lambda_is_echoed_with_warning() {
        let mut cfg = preset("coupled-svi").unwrap();
        cfg.lambda = Some(0.5);
        let out = run(&cfg).unwrap();
        assert_eq!(out.summary.lambda, Some(0.5));
        assert!(out.summary.warnings.iter().any(|w| w.contains("lambda")));
    }

    #[test]
    fn strong_bound_holds_in_summary() {
        use crate::experiment::config::parse_config;
        let text = r#"
            [problem]
            kind = "dynamic"
            matrix = [[2.0, 1.0], [0.0, 1.0]]
            offset = [1.0, 1.0]
            initial = [4.0, -3.0]
            [schedule]
            kind = "constant"
            gamma = 0.27
            [stop]
            epsilon = 1e-12
            max_iters = 400
            [bounds]
            epsilon = 1e-6
            [time_grid]
            delta = 0.1
            count = 400
        "#;
        let cfg = parse_config(text).unwrap();
        let out = run(&cfg).unwrap();
        let k = out.summary.bounds.iteration_bound_strong.unwrap();
        assert!(out.summary.iterations_to_epsilon.unwrap() as u64 <= k);
    }

    #[test]
    fn mc_requires_stochastic() {
        assert!(matches!(monte_carlo(&preset("coupled-svi").unwrap(), Some(3)), Err(RunError::Usage(_))));
        let c = monte_carlo(&preset("stochastic-svi").unwrap(), Some(4)).unwrap();
        assert_eq!(c.n_seeds, 4);
        assert_eq!(c.base_seed, 1);
    }

    #[test]
    fn bounds_for_each_preset() {
        for name in crate::experiment::presets::PRESET_NAMES {
            let b = bounds(&preset(name).unwrap()).unwrap();
            assert!(b.error_budget.total > 0.0);
        }
        let d = bounds(&preset("dynamic-svi").unwrap()).unwrap();
        assert!((d.time_lipschitz.unwrap() - 0.1).abs() < 1e-12);
        assert!((d.admissible_time_step.unwrap() - 1e-5).abs() < 1e-15);
    }
}
