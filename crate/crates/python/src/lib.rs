//! Python bindings for `inclusionkit`.
//!
//! Matrices are lists of rows and vectors are lists of floats. Errors from the
//! core crate surface as `ValueError`.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use inclusionkit::analysis::{self, ErrorBudget};
use inclusionkit::experiment::{parse_config, presets, runner, trace};
use inclusionkit::linalg::{self, Matrix, Vector};
use inclusionkit::operators::{AffineMap, DynamicOp, Modulation, SeparableFamily, TimeGrid};
use inclusionkit::resolvents;
use inclusionkit::schedules::{self, RobbinsMonro};
use inclusionkit::solvers::{self, SolverReport, StopRule, Verdict};

fn err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn vector(v: Vec<f64>) -> PyResult<Vector> {
    Vector::new(v).map_err(err)
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Matrix> {
    Matrix::from_rows(rows).map_err(err)
}

/// Outcome of a solve.
#[pyclass(frozen, module = "inclusionkit_py")]
pub struct Report {
    inner: SolverReport,
}

#[pymethods]
impl Report {
    /// "converged", "max_iters_reached", or "diverged".
    #[getter]
    fn verdict(&self) -> &'static str {
        match self.inner.verdict {
            Verdict::Converged => "converged",
            Verdict::MaxItersReached => "max_iters_reached",
            Verdict::Diverged => "diverged",
        }
    }

    #[getter]
    fn iterations(&self) -> usize {
        self.inner.iterations()
    }

    #[getter]
    fn final_iterate(&self) -> Vec<f64> {
        self.inner.final_iterate.as_slice().to_vec()
    }

    #[getter]
    fn final_partner(&self) -> Option<Vec<f64>> {
        self.inner.final_partner.as_ref().map(|p| p.as_slice().to_vec())
    }

    #[getter]
    fn seed(&self) -> Option<u64> {
        self.inner.seed
    }

    #[getter]
    fn warnings(&self) -> Vec<String> {
        self.inner.warnings.clone()
    }

    fn step_residuals(&self) -> Vec<f64> {
        self.inner.records.iter().map(|r| r.step_residual).collect()
    }

    fn errors_to_reference(&self) -> Vec<Option<f64>> {
        self.inner.records.iter().map(|r| r.error_to_reference).collect()
    }

    fn combined_residuals(&self) -> Vec<Option<f64>> {
        self.inner.records.iter().map(|r| r.combined_residual).collect()
    }

    fn iterates(&self) -> Vec<Vec<f64>> {
        self.inner.records.iter().map(|r| r.iterate.as_slice().to_vec()).collect()
    }

    /// The trace in the CLI's CSV format.
    fn to_csv(&self) -> PyResult<String> {
        let mut buf = Vec::new();
        trace::write_csv(&self.inner, &mut buf).map_err(err)?;
        String::from_utf8(buf).map_err(err)
    }

    fn __repr__(&self) -> String {
        format!("Report(verdict={:?}, iterations={})", self.verdict(), self.iterations())
    }
}

/// Step-size schedule.
#[pyclass(frozen, module = "inclusionkit_py", name = "Schedule")]
pub struct PySchedule {
    inner: schedules::Schedule,
}

#[pymethods]
impl PySchedule {
    #[staticmethod]
    fn harmonic(offset: u64) -> PyResult<Self> {
        Ok(Self { inner: schedules::Schedule::harmonic(offset).map_err(err)? })
    }

    /// `theta / (rho + 1)^beta` with any positive `beta`.
    #[staticmethod]
    fn power(theta: f64, beta: f64) -> PyResult<Self> {
        Ok(Self { inner: schedules::Schedule::power_any_exponent(theta, beta).map_err(err)? })
    }

    #[staticmethod]
    fn constant(gamma: f64) -> PyResult<Self> {
        Ok(Self { inner: schedules::Schedule::constant(gamma).map_err(err)? })
    }

    fn step_at(&self, rho: usize) -> f64 {
        self.inner.step_at(rho)
    }

    /// "satisfies", "violates_divergent_sum", or "violates_square_summability".
    fn classify(&self) -> &'static str {
        match schedules::classify_robbins_monro(&self.inner) {
            RobbinsMonro::Satisfies => "satisfies",
            RobbinsMonro::ViolatesDivergentSum => "violates_divergent_sum",
            RobbinsMonro::ViolatesSquareSummability => "violates_square_summability",
        }
    }

    fn __repr__(&self) -> String {
        format!("Schedule({:?})", self.inner)
    }
}

/// `(mu, L)`: smallest eigenvalue of the symmetric part and largest singular value.
#[pyfunction]
fn spectral_bounds(a: Vec<Vec<f64>>) -> PyResult<(f64, f64)> {
    let b = linalg::spectral_bounds(&matrix(a)?).map_err(err)?;
    Ok((b.mu, b.lipschitz))
}

/// Resolvent of `T(z) = A z - b`.
#[pyfunction]
fn resolve_affine(a: Vec<Vec<f64>>, b: Vec<f64>, gamma: f64, z: Vec<f64>) -> PyResult<Vec<f64>> {
    let x = resolvents::resolve_affine(&matrix(a)?, &vector(b)?, gamma, &vector(z)?).map_err(err)?;
    Ok(x.into_inner())
}

#[pyfunction]
fn soft_threshold(z: Vec<f64>, gamma: f64, weight: f64) -> PyResult<Vec<f64>> {
    let family = SeparableFamily::SoftThreshold { weight };
    Ok(resolvents::resolve_separable(&family, gamma, &vector(z)?).map_err(err)?.into_inner())
}

#[pyfunction]
fn box_projection(z: Vec<f64>, lo: Vec<f64>, hi: Vec<f64>) -> PyResult<Vec<f64>> {
    let family = SeparableFamily::BoxProjection { lo: vector(lo)?, hi: vector(hi)? };
    Ok(resolvents::resolve_separable(&family, 1.0, &vector(z)?).map_err(err)?.into_inner())
}

#[pyfunction]
fn iteration_bound_strong(r0_sq: f64, mu: f64, lipschitz: f64, gamma: f64, eps: f64) -> PyResult<u64> {
    analysis::iteration_bound_strong(r0_sq, mu, lipschitz, gamma, eps).map_err(err)
}

#[pyfunction]
fn iteration_bound_coupled(r0_sq: f64, mu1: f64, mu2: f64, gamma: f64, eps: f64) -> PyResult<u64> {
    analysis::iteration_bound_coupled(r0_sq, mu1, mu2, gamma, eps).map_err(err)
}

#[pyfunction]
fn total_error_bound(c: f64, delta_iota: f64, variance: f64, rho: u64) -> PyResult<f64> {
    analysis::total_error_bound(&ErrorBudget::new(c, delta_iota, variance, rho).map_err(err)?).map_err(err)
}

/// Solve `alpha(iota) A z - b` with `alpha(iota) = base + amplitude sin(frequency iota)`.
#[pyfunction]
#[pyo3(signature = (a, b, z0, schedule, epsilon, max_iters, base=1.0, amplitude=0.0, frequency=0.0, iota0=0.0, delta=0.1))]
#[allow(clippy::too_many_arguments)]
fn solve_dynamic(
    a: Vec<Vec<f64>>,
    b: Vec<f64>,
    z0: Vec<f64>,
    schedule: &PySchedule,
    epsilon: f64,
    max_iters: usize,
    base: f64,
    amplitude: f64,
    frequency: f64,
    iota0: f64,
    delta: f64,
) -> PyResult<Report> {
    let map = AffineMap::new(matrix(a)?, vector(b)?).map_err(err)?;
    let grid = TimeGrid::new(iota0, delta, max_iters).map_err(err)?;
    let op = DynamicOp::modulated_affine(map, Modulation { base, amplitude, frequency }, grid).map_err(err)?;
    let stop = StopRule::new(epsilon, max_iters).map_err(err)?;
    let inner = solvers::solve_dynamic(&op, &vector(z0)?, &schedule.inner, &stop).map_err(err)?;
    Ok(Report { inner })
}

/// TOML text of a shipped preset.
#[pyfunction]
fn preset_config(name: &str) -> PyResult<&'static str> {
    presets::preset_source(name).map_err(err)
}

#[pyfunction]
fn run_preset(name: &str) -> PyResult<Report> {
    let cfg = presets::preset(name).map_err(err)?;
    Ok(Report { inner: runner::solve(&cfg).map_err(err)? })
}

/// Solve the problem in a TOML config string. Output paths in the config are ignored.
#[pyfunction]
fn run_config(text: &str) -> PyResult<Report> {
    let cfg = parse_config(text).map_err(err)?;
    Ok(Report { inner: runner::solve(&cfg).map_err(err)? })
}

/// Bound predictions for a TOML config string, as JSON.
#[pyfunction]
fn bounds(text: &str) -> PyResult<String> {
    let b = runner::bounds(&parse_config(text).map_err(err)?).map_err(err)?;
    serde_json::to_string(&b).map_err(err)
}

/// Monte Carlo curve `[(k, mean_sq_error, standard_error)]` for a stochastic config string.
#[pyfunction]
#[pyo3(signature = (text, seeds=None))]
fn mc_curve(py: Python<'_>, text: &str, seeds: Option<usize>) -> PyResult<Vec<(usize, f64, Option<f64>)>> {
    let cfg = parse_config(text).map_err(err)?;
    let curve = py.detach(|| runner::monte_carlo(&cfg, seeds)).map_err(err)?;
    Ok(curve.points.iter().map(|p| (p.k, p.mean_sq_error, p.standard_error)).collect())
}

#[pymodule]
pub fn inclusionkit_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Report>()?;
    m.add_class::<PySchedule>()?;
    m.add_function(wrap_pyfunction!(spectral_bounds, m)?)?;
    m.add_function(wrap_pyfunction!(resolve_affine, m)?)?;
    m.add_function(wrap_pyfunction!(soft_threshold, m)?)?;
    m.add_function(wrap_pyfunction!(box_projection, m)?)?;
    m.add_function(wrap_pyfunction!(iteration_bound_strong, m)?)?;
    m.add_function(wrap_pyfunction!(iteration_bound_coupled, m)?)?;
    m.add_function(wrap_pyfunction!(total_error_bound, m)?)?;
    m.add_function(wrap_pyfunction!(solve_dynamic, m)?)?;
    m.add_function(wrap_pyfunction!(preset_config, m)?)?;
    m.add_function(wrap_pyfunction!(run_preset, m)?)?;
    m.add_function(wrap_pyfunction!(run_config, m)?)?;
    m.add_function(wrap_pyfunction!(bounds, m)?)?;
    m.add_function(wrap_pyfunction!(mc_curve, m)?)?;
    Ok(())
}
