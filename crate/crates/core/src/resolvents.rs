//! Resolvents `J_γ^T = (I + γT)⁻¹`.
//!
//! Affine and separable operators have closed forms. Anything else goes through
//! [`resolve_iterative`], which solves `x + γT(x) = z` to a requested tolerance.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{self, LinalgError, Matrix, Vector};
use crate::operators::{OperatorError, SeparableFamily, StaticKind, StaticOp};

pub const DEFAULT_INNER_TOL: f64 = 1e-12;
pub const DEFAULT_INNER_MAX: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ResolventError {
    #[error("resolvent step must be positive and finite, got {0}")]
    InvalidStep(f64),
    #[error("inner tolerance must be positive, got {0}")]
    InvalidTolerance(f64),
    #[error("I + γA is singular; the resolvent is ill-posed")]
    IllPosed,
    #[error("fixed-point scheme needs γL < 1, got γL = {gamma_l}")]
    Precondition { gamma_l: f64 },
    #[error("inner solve did not converge in {iterations} iterations (residual {residual:e})")]
    NoConvergence { best: Vector, residual: f64, iterations: usize },
    #[error(transparent)]
    Operator(#[from] OperatorError),
}

impl From<LinalgError> for ResolventError {
    fn from(e: LinalgError) -> Self {
        ResolventError::Operator(e.into())
    }
}

pub type Result<T> = std::result::Result<T, ResolventError>;

/// Inner iteration used by [`resolve_iterative`] for single-valued operators.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InnerScheme {
    /// `x ← z − γT(x)`; a contraction when `γL < 1`, rejected otherwise.
    FixedPoint,
    /// `x ← x − λ(x + γT(x) − z)` with `λ` halved whenever the residual fails to drop.
    Safeguarded,
    /// Fixed point when `γL < 1`, safeguarded otherwise.
    #[default]
    Auto,
}

#[derive(Debug, Clone)]
pub struct ResolventRequest<'a> {
    pub op: &'a StaticOp,
    pub gamma: f64,
    pub point: Vector,
    pub inner_tol: f64,
    pub inner_max: usize,
    pub scheme: InnerScheme,
}

impl<'a> ResolventRequest<'a> {
    pub fn new(op: &'a StaticOp, gamma: f64, point: Vector) -> Self {
        Self {
            op,
            gamma,
            point,
            inner_tol: DEFAULT_INNER_TOL,
            inner_max: DEFAULT_INNER_MAX,
            scheme: InnerScheme::Auto,
        }
    }

    pub fn with_scheme(mut self, scheme: InnerScheme) -> Self {
        self.scheme = scheme;
        self
    }

    pub fn with_tolerance(mut self, inner_tol: f64, inner_max: usize) -> Self {
        self.inner_tol = inner_tol;
        self.inner_max = inner_max;
        self
    }
}

/// Result of an inner solve.
#[derive(Debug, Clone, PartialEq)]
pub struct InnerSolution {
    pub point: Vector,
    pub iterations: usize,
    /// `‖x + γT(x) − z‖` for single-valued operators; bracket width for separable ones.
    pub residual: f64,
}

fn check_gamma(gamma: f64) -> Result<()> {
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(ResolventError::InvalidStep(gamma));
    }
    Ok(())
}

/// Closed form for `T(z) = A z − b`: solves `(I + γA) x = z + γb`.
pub fn resolve_affine(a: &Matrix, b: &Vector, gamma: f64, z: &Vector) -> Result<Vector> {
    check_gamma(gamma)?;
    let lhs = a.shifted_identity(gamma)?;
    let rhs = z.axpy(gamma, b)?;
    let x = linalg::solve(&lhs, &rhs).map_err(|e| match e {
        LinalgError::Singular | LinalgError::ResidualCheck { .. } => ResolventError::IllPosed,
        other => other.into(),
    })?;
    let residual = lhs.mul_vec(&x)?.distance(&rhs)?;
    if residual > 1e-10 * (1.0 + z.norm2()) {
        return Err(ResolventError::IllPosed);
    }
    Ok(x)
}

/// Proximal maps of the separable families. Soft thresholding maps the kink `|z| = γw` to 0.
pub fn resolve_separable(family: &SeparableFamily, gamma: f64, z: &Vector) -> Result<Vector> {
    check_gamma(gamma)?;
    family.validate()?;
    match family {
        SeparableFamily::SoftThreshold { weight } => {
            let t = gamma * weight;
            Ok(z.map(|c| if c.abs() <= t { 0.0 } else { c.signum() * (c.abs() - t) })?)
        }
        SeparableFamily::BoxProjection { lo, hi } => {
            z.check_dim(lo)?;
            let coords = (0..z.dim()).map(|i| z[i].clamp(lo[i], hi[i])).collect();
            Ok(Vector::new(coords)?)
        }
    }
}

/// Generic inner solve of `x + γT(x) = z`.
///
/// Single-valued operators use the scheme in `req.scheme` and stop once
/// `‖x + γT(x) − z‖ ≤ inner_tol·(1 + ‖z‖)`. Separable families are solved
/// coordinate-wise by bisection on the monotone graph of `x + γT(x)`, stopping when
/// every bracket is narrower than `inner_tol·(1 + ‖z‖)`.
pub fn resolve_iterative(req: &ResolventRequest<'_>) -> Result<InnerSolution> {
    check_gamma(req.gamma)?;
    if !(req.inner_tol > 0.0) {
        return Err(ResolventError::InvalidTolerance(req.inner_tol));
    }
    if req.point.dim() != req.op.dim() {
        return Err(LinalgError::DimensionMismatch { expected: req.op.dim(), found: req.point.dim() }
            .into());
    }
    match req.op.kind() {
        StaticKind::Separable(family) => bisect_separable(family, req),
        _ => {
            let gamma_l = req.gamma * req.op.meta().lipschitz;
            match req.scheme {
                InnerScheme::FixedPoint if !(gamma_l < 1.0) => {
                    Err(ResolventError::Precondition { gamma_l })
                }
                InnerScheme::FixedPoint => fixed_point(req),
                InnerScheme::Auto if gamma_l < 1.0 => fixed_point(req),
                InnerScheme::Auto | InnerScheme::Safeguarded => safeguarded(req),
            }
        }
    }
}

fn fixed_point(req: &ResolventRequest<'_>) -> Result<InnerSolution> {
    let z = &req.point;
    let tol = req.inner_tol * (1.0 + z.norm2());
    let mut x = z.clone();
    let mut best = (x.clone(), f64::INFINITY);
    for k in 0..req.inner_max {
        let next = z.axpy(-req.gamma, &req.op.eval(&x)?)?;
        // x + γT(x) − z = x − next
        let residual = x.distance(&next)?;
        if residual < best.1 {
            best = (x.clone(), residual);
        }
        if residual <= tol {
            return Ok(InnerSolution { point: x, iterations: k, residual });
        }
        x = next;
    }
    Err(ResolventError::NoConvergence { best: best.0, residual: best.1, iterations: req.inner_max })
}

fn safeguarded(req: &ResolventRequest<'_>) -> Result<InnerSolution> {
    let z = &req.point;
    let tol = req.inner_tol * (1.0 + z.norm2());
    let gamma = req.gamma;
    let residual_of = |x: &Vector| -> Result<Vector> {
        Ok(x.axpy(gamma, &req.op.eval(x)?)?.sub(z)?)
    };
    let mut x = z.clone();
    let mut g = residual_of(&x)?;
    let mut r = g.norm2();
    let mut relax = 0.5;
    for k in 0..req.inner_max {
        if r <= tol {
            return Ok(InnerSolution { point: x, iterations: k, residual: r });
        }
        let trial = x.axpy(-relax, &g)?;
        let g_trial = residual_of(&trial)?;
        let r_trial = g_trial.norm2();
        if r_trial < r {
            x = trial;
            g = g_trial;
            r = r_trial;
        } else {
            relax *= 0.5;
            if relax < 1e-16 {
                break;
            }
        }
    }
    if r <= tol {
        return Ok(InnerSolution { point: x, iterations: req.inner_max, residual: r });
    }
    Err(ResolventError::NoConvergence { best: x, residual: r, iterations: req.inner_max })
}

/// Where `z` sits relative to the set `x + γT(x)`.
fn side(family: &SeparableFamily, i: usize, gamma: f64, x: f64, z: f64) -> std::cmp::Ordering {
    use std::cmp::Ordering::*;
    let (lower, upper) = family.graph_interval(i, x);
    if z < x + gamma * lower {
        Less
    } else if z > x + gamma * upper {
        Greater
    } else {
        Equal
    }
}

fn bisect_separable(family: &SeparableFamily, req: &ResolventRequest<'_>) -> Result<InnerSolution> {
    use std::cmp::Ordering::*;
    let z = &req.point;
    let tol = req.inner_tol * (1.0 + z.norm2());
    let gamma = req.gamma;
    let mut out = Vec::with_capacity(z.dim());
    let mut total_iters = 0;
    let mut widest = 0.0_f64;
    for i in 0..z.dim() {
        let zi = z[i];
        // bracket [a, b] with the root to the right of a and to the left of b
        let mut radius = 1.0 + zi.abs();
        let mut iters = 0;
        let (mut a, mut b) = loop {
            let (a, b) = (zi - radius, zi + radius);
            let left_ok = side(family, i, gamma, a, zi) != Less;
            let right_ok = side(family, i, gamma, b, zi) != Greater;
            if left_ok && right_ok {
                break (a, b);
            }
            radius *= 2.0;
            iters += 1;
            if iters > 2000 || !radius.is_finite() {
                return Err(ResolventError::NoConvergence {
                    best: z.clone(),
                    residual: f64::INFINITY,
                    iterations: iters,
                });
            }
        };
        let mut root = None;
        for end in [a, b] {
            if side(family, i, gamma, end, zi) == Equal {
                root = Some(end);
            }
        }
        while root.is_none() && b - a > tol {
            if iters >= req.inner_max {
                let mut best = out.clone();
                best.push(0.5 * (a + b));
                best.extend_from_slice(&z.as_slice()[i + 1..]);
                return Err(ResolventError::NoConvergence {
                    best: Vector::new(best)?,
                    residual: b - a,
                    iterations: iters,
                });
            }
            let mid = 0.5 * (a + b);
            match side(family, i, gamma, mid, zi) {
                Less => b = mid,
                Greater => a = mid,
                Equal => root = Some(mid),
            }
            iters += 1;
        }
        let width = if root.is_some() { 0.0 } else { b - a };
        widest = widest.max(width);
        total_iters += iters;
        out.push(root.unwrap_or(0.5 * (a + b)));
    }
    Ok(InnerSolution { point: Vector::new(out)?, iterations: total_iters, residual: widest })
}

/// Resolvent of any static operator: closed forms where available, the inner solver otherwise.
pub fn resolve(op: &StaticOp, gamma: f64, z: &Vector) -> Result<Vector> {
    match op.kind() {
        StaticKind::Affine(map) => resolve_affine(&map.matrix, &map.offset, gamma, z),
        StaticKind::Separable(family) => resolve_separable(family, gamma, z),
        StaticKind::Custom(_) => {
            Ok(resolve_iterative(&ResolventRequest::new(op, gamma, z.clone()))?.point)
        }
    }
}
