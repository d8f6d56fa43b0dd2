//! Operator families: static, time-varying, stochastic, and coupled pairs.
//!
//! Sign convention throughout: an affine operator is `T(z) = A z − b`. Configs that
//! describe an operator as `A z + b` negate the stored offset.

use std::fmt;
use std::sync::Arc;

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{self, LinalgError, Matrix, SpectralBounds, Vector};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OperatorError {
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("invalid operator metadata: {0}")]
    InvalidMetadata(String),
    #[error("invalid operator parameter: {0}")]
    InvalidParameter(String),
    #[error("point lies outside the operator domain (coordinate {coordinate})")]
    OutsideDomain { coordinate: usize },
    #[error("metadata check failed: {0}")]
    MetadataViolated(String),
}

pub type Result<T> = std::result::Result<T, OperatorError>;

/// Monotonicity and Lipschitz constants attached to an operator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OperatorMetadata {
    /// Strong monotonicity modulus; nonpositive when not strongly monotone.
    pub mu: f64,
    /// Lipschitz constant in the iterate. Infinite for set-valued families.
    pub lipschitz: f64,
    /// Lipschitz constant in time (dynamic operators). For modulated affine
    /// families this is the coefficient multiplying `‖z‖`.
    pub time_lipschitz: f64,
}

impl OperatorMetadata {
    pub fn new(mu: f64, lipschitz: f64, time_lipschitz: f64) -> Result<Self> {
        if mu.is_nan() || !(lipschitz >= 0.0) || !(time_lipschitz >= 0.0) {
            return Err(OperatorError::InvalidMetadata(format!(
                "mu={mu}, L={lipschitz}, L_time={time_lipschitz}"
            )));
        }
        if mu > 0.0 && mu > lipschitz * (1.0 + 1e-12) {
            return Err(OperatorError::InvalidMetadata(format!(
                "strong monotonicity {mu} exceeds Lipschitz constant {lipschitz}"
            )));
        }
        Ok(Self { mu: mu.min(lipschitz), lipschitz, time_lipschitz })
    }

    fn from_spectral(b: SpectralBounds) -> Self {
        Self { mu: b.mu.min(b.lipschitz), lipschitz: b.lipschitz, time_lipschitz: 0.0 }
    }

    pub fn is_strongly_monotone(&self) -> bool {
        self.mu > 0.0
    }
}

/// `z ↦ A z − b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineMap {
    pub matrix: Matrix,
    pub offset: Vector,
}

impl AffineMap {
    pub fn new(matrix: Matrix, offset: Vector) -> Result<Self> {
        if !matrix.is_square() {
            return Err(LinalgError::NotSquare { rows: matrix.rows(), cols: matrix.cols() }.into());
        }
        if offset.dim() != matrix.rows() {
            return Err(LinalgError::DimensionMismatch {
                expected: matrix.rows(),
                found: offset.dim(),
            }
            .into());
        }
        Ok(Self { matrix, offset })
    }

    pub fn dim(&self) -> usize {
        self.offset.dim()
    }

    pub fn apply(&self, z: &Vector) -> Result<Vector> {
        Ok(self.matrix.mul_vec(z)?.sub(&self.offset)?)
    }

    /// The unique zero `A⁻¹ b`, when `A` is invertible.
    pub fn zero(&self) -> Result<Vector> {
        Ok(linalg::solve(&self.matrix, &self.offset)?)
    }
}

/// Separable maximal monotone operators whose resolvents are classical proximal maps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum SeparableFamily {
    /// `weight · ∂‖·‖₁`; resolvent is soft thresholding at `γ · weight`.
    SoftThreshold { weight: f64 },
    /// Normal cone of the box `[lo, hi]`; resolvent is the projection onto it.
    BoxProjection { lo: Vector, hi: Vector },
}

impl SeparableFamily {
    pub fn validate(&self) -> Result<()> {
        match self {
            SeparableFamily::SoftThreshold { weight } => {
                if !(weight.is_finite() && *weight >= 0.0) {
                    return Err(OperatorError::InvalidParameter(format!(
                        "soft threshold weight must be nonnegative, got {weight}"
                    )));
                }
            }
            SeparableFamily::BoxProjection { lo, hi } => {
                lo.check_dim(hi)?;
                if let Some(i) = (0..lo.dim()).find(|&i| lo[i] > hi[i]) {
                    return Err(OperatorError::InvalidParameter(format!(
                        "box bound lo[{i}]={} exceeds hi[{i}]={}",
                        lo[i], hi[i]
                    )));
                }
            }
        }
        Ok(())
    }

    /// The set `T(x)_i` as a closed interval `[lower, upper]` (possibly unbounded).
    /// Outside the domain of a normal cone the graph is extended by `±∞`, which keeps
    /// `x ↦ x + γT(x)` monotone for bisection.
    pub fn graph_interval(&self, i: usize, x: f64) -> (f64, f64) {
        match self {
            SeparableFamily::SoftThreshold { weight } => {
                if x > 0.0 {
                    (*weight, *weight)
                } else if x < 0.0 {
                    (-weight, -weight)
                } else {
                    (-weight, *weight)
                }
            }
            SeparableFamily::BoxProjection { lo, hi } => {
                let (l, h) = (lo[i], hi[i]);
                let lower = if x > h {
                    f64::INFINITY
                } else if x <= l {
                    f64::NEG_INFINITY
                } else {
                    0.0
                };
                let upper = if x < l {
                    f64::NEG_INFINITY
                } else if x >= h {
                    f64::INFINITY
                } else {
                    0.0
                };
                (lower, upper)
            }
        }
    }

    fn min_norm_selection(&self, z: &Vector) -> Result<Vector> {
        match self {
            SeparableFamily::SoftThreshold { weight } => {
                Ok(z.map(|c| if c == 0.0 { 0.0 } else { weight * c.signum() })?)
            }
            SeparableFamily::BoxProjection { lo, hi } => {
                z.check_dim(lo)?;
                if let Some(i) = (0..z.dim()).find(|&i| z[i] < lo[i] || z[i] > hi[i]) {
                    return Err(OperatorError::OutsideDomain { coordinate: i });
                }
                Ok(Vector::zeros(z.dim())?)
            }
        }
    }
}

type StaticFn = dyn Fn(&Vector) -> Result<Vector> + Send + Sync;

/// A user-supplied single-valued operator with declared metadata.
#[derive(Clone)]
pub struct CustomOp {
    pub name: String,
    eval: Arc<StaticFn>,
}

impl CustomOp {
    pub fn new(
        name: impl Into<String>,
        eval: impl Fn(&Vector) -> Result<Vector> + Send + Sync + 'static,
    ) -> Self {
        Self { name: name.into(), eval: Arc::new(eval) }
    }
}

impl fmt::Debug for CustomOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CustomOp").field("name", &self.name).finish_non_exhaustive()
    }
}

impl PartialEq for CustomOp {
    fn eq(&self, other: &Self) -> bool {
        Arc::ptr_eq(&self.eval, &other.eval)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum StaticKind {
    Affine(AffineMap),
    Separable(SeparableFamily),
    Custom(CustomOp),
}

/// A time-independent monotone operator.
#[derive(Debug, Clone, PartialEq)]
pub struct StaticOp {
    kind: StaticKind,
    meta: OperatorMetadata,
    dim: usize,
}

impl StaticOp {
    /// `T(z) = A z − b`, with `(μ, L)` taken from the spectrum of `A`.
    pub fn affine(matrix: Matrix, offset: Vector) -> Result<Self> {
        let map = AffineMap::new(matrix, offset)?;
        let meta = OperatorMetadata::from_spectral(linalg::spectral_bounds(&map.matrix)?);
        Ok(Self::affine_with_meta(map, meta))
    }

    pub(crate) fn affine_with_meta(map: AffineMap, meta: OperatorMetadata) -> Self {
        let dim = map.dim();
        Self { kind: StaticKind::Affine(map), meta, dim }
    }

    pub fn zero_operator(dim: usize) -> Result<Self> {
        Self::affine(Matrix::zeros(dim, dim)?, Vector::zeros(dim)?)
    }

    pub fn separable(family: SeparableFamily, dim: usize) -> Result<Self> {
        family.validate()?;
        if let SeparableFamily::BoxProjection { lo, .. } = &family {
            if lo.dim() != dim {
                return Err(LinalgError::DimensionMismatch { expected: dim, found: lo.dim() }.into());
            }
        }
        if dim == 0 {
            return Err(LinalgError::Empty.into());
        }
        let meta = OperatorMetadata { mu: 0.0, lipschitz: f64::INFINITY, time_lipschitz: 0.0 };
        Ok(Self { kind: StaticKind::Separable(family), meta, dim })
    }

    /// Custom operators must declare their metadata; see [`check_metadata`].
    pub fn custom(op: CustomOp, dim: usize, meta: OperatorMetadata) -> Result<Self> {
        if dim == 0 {
            return Err(LinalgError::Empty.into());
        }
        Ok(Self { kind: StaticKind::Custom(op), meta, dim })
    }

    pub fn kind(&self) -> &StaticKind {
        &self.kind
    }

    pub fn meta(&self) -> &OperatorMetadata {
        &self.meta
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn as_affine(&self) -> Option<&AffineMap> {
        match &self.kind {
            StaticKind::Affine(m) => Some(m),
            _ => None,
        }
    }

    /// Evaluates `T(z)`. Separable families return the minimal-norm element of `T(z)`.
    pub fn eval(&self, z: &Vector) -> Result<Vector> {
        if z.dim() != self.dim {
            return Err(LinalgError::DimensionMismatch { expected: self.dim, found: z.dim() }.into());
        }
        match &self.kind {
            StaticKind::Affine(map) => map.apply(z),
            StaticKind::Separable(fam) => fam.min_norm_selection(z),
            StaticKind::Custom(op) => {
                let out = (op.eval)(z)?;
                if out.dim() != self.dim {
                    return Err(LinalgError::DimensionMismatch { expected: self.dim, found: out.dim() }
                        .into());
                }
                Ok(out)
            }
        }
    }
}

pub fn eval_static(op: &StaticOp, z: &Vector) -> Result<Vector> {
    op.eval(z)
}

/// Randomized check of declared monotonicity and Lipschitz constants on the ball of
/// radius `radius`, using `trials` random pairs.
pub fn check_metadata(op: &StaticOp, trials: usize, radius: f64, seed: u64) -> Result<()> {
    let meta = op.meta;
    let mut rng = RngState::new(seed);
    let point = |rng: &mut RngState| -> Result<Vector> {
        let coords = (0..op.dim)
            .map(|_| {
                let (u, next) = rng.uniform();
                *rng = next;
                radius * (2.0 * u - 1.0)
            })
            .collect();
        Ok(Vector::new(coords)?)
    };
    for _ in 0..trials {
        let x = point(&mut rng)?;
        let y = point(&mut rng)?;
        let dx = x.sub(&y)?;
        let dt = op.eval(&x)?.sub(&op.eval(&y)?)?;
        let gap = dt.dot(&dx)?;
        let d2 = dx.norm2_sq();
        let mu = meta.mu.max(0.0);
        if gap < (mu - 1e-9) * d2 - 1e-12 {
            return Err(OperatorError::MetadataViolated(format!(
                "<T(x)-T(y), x-y> = {gap:e} below {mu}·‖x-y‖² = {:e}",
                mu * d2
            )));
        }
        if meta.lipschitz.is_finite() && dt.norm2() > (meta.lipschitz + 1e-9) * dx.norm2() + 1e-12 {
            return Err(OperatorError::MetadataViolated(format!(
                "‖T(x)-T(y)‖ = {:e} exceeds L·‖x-y‖ = {:e}",
                dt.norm2(),
                meta.lipschitz * dx.norm2()
            )));
        }
    }
    Ok(())
}

/// Uniform time grid `ι_ρ = ι₀ + ρ Δι`, `ρ < count`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub iota0: f64,
    pub delta: f64,
    pub count: usize,
}

impl TimeGrid {
    pub fn new(iota0: f64, delta: f64, count: usize) -> Result<Self> {
        if !iota0.is_finite() || !(delta > 0.0 && delta.is_finite()) || count == 0 {
            return Err(OperatorError::InvalidParameter(format!(
                "time grid needs finite iota0, delta > 0, count > 0 (got {iota0}, {delta}, {count})"
            )));
        }
        Ok(Self { iota0, delta, count })
    }

    /// Computed multiplicatively so there is no accumulation drift.
    pub fn time_at(&self, rho: usize) -> f64 {
        self.iota0 + rho as f64 * self.delta
    }
}

/// `α(ι) = base + amplitude · sin(frequency · ι)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Modulation {
    pub base: f64,
    pub amplitude: f64,
    pub frequency: f64,
}

impl Modulation {
    pub fn constant(value: f64) -> Self {
        Self { base: value, amplitude: 0.0, frequency: 0.0 }
    }

    pub fn at(&self, iota: f64) -> f64 {
        if self.amplitude == 0.0 {
            return self.base;
        }
        self.base + self.amplitude * (self.frequency * iota).sin()
    }

    pub fn range(&self) -> (f64, f64) {
        (self.base - self.amplitude.abs(), self.base + self.amplitude.abs())
    }
}

type DynamicFn = dyn Fn(&Vector, f64) -> Result<Vector> + Send + Sync;

#[derive(Clone)]
pub enum DynamicFamily {
    /// `T(z, ι) = α(ι) A z − b`.
    ModulatedAffine { map: AffineMap, modulation: Modulation },
    Custom { name: String, eval: Arc<DynamicFn> },
}

impl fmt::Debug for DynamicFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DynamicFamily::ModulatedAffine { map, modulation } => f
                .debug_struct("ModulatedAffine")
                .field("map", map)
                .field("modulation", modulation)
                .finish(),
            DynamicFamily::Custom { name, .. } => {
                f.debug_struct("Custom").field("name", name).finish_non_exhaustive()
            }
        }
    }
}

/// A time-varying operator sampled on a grid.
#[derive(Debug, Clone)]
pub struct DynamicOp {
    family: DynamicFamily,
    grid: TimeGrid,
    meta: OperatorMetadata,
    dim: usize,
}

impl DynamicOp {
    pub fn modulated_affine(map: AffineMap, modulation: Modulation, grid: TimeGrid) -> Result<Self> {
        let (lo, hi) = modulation.range();
        if lo <= 0.0 {
            return Err(OperatorError::InvalidParameter(format!(
                "modulation must stay positive, range is [{lo}, {hi}]"
            )));
        }
        let b = linalg::spectral_bounds(&map.matrix)?;
        let mu = if b.mu >= 0.0 { lo * b.mu } else { hi * b.mu };
        let meta = OperatorMetadata {
            mu: mu.min(hi * b.lipschitz),
            lipschitz: hi * b.lipschitz,
            time_lipschitz: modulation.amplitude.abs() * modulation.frequency.abs() * b.lipschitz,
        };
        let dim = map.dim();
        Ok(Self { family: DynamicFamily::ModulatedAffine { map, modulation }, grid, meta, dim })
    }

    pub fn custom(
        name: impl Into<String>,
        eval: impl Fn(&Vector, f64) -> Result<Vector> + Send + Sync + 'static,
        dim: usize,
        grid: TimeGrid,
        meta: OperatorMetadata,
    ) -> Self {
        Self {
            family: DynamicFamily::Custom { name: name.into(), eval: Arc::new(eval) },
            grid,
            meta,
            dim,
        }
    }

    pub fn family(&self) -> &DynamicFamily {
        &self.family
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn meta(&self) -> &OperatorMetadata {
        &self.meta
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn eval(&self, z: &Vector, iota: f64) -> Result<Vector> {
        if !iota.is_finite() {
            return Err(OperatorError::InvalidParameter(format!("time must be finite, got {iota}")));
        }
        if z.dim() != self.dim {
            return Err(LinalgError::DimensionMismatch { expected: self.dim, found: z.dim() }.into());
        }
        match &self.family {
            DynamicFamily::ModulatedAffine { map, modulation } => {
                Ok(map.matrix.mul_vec(z)?.scale(modulation.at(iota))?.sub(&map.offset)?)
            }
            DynamicFamily::Custom { eval, .. } => eval(z, iota),
        }
    }

    /// The static operator `T(·, ι)`.
    pub fn freeze(&self, iota: f64) -> Result<StaticOp> {
        match &self.family {
            DynamicFamily::ModulatedAffine { map, modulation } => {
                let alpha = modulation.at(iota);
                StaticOp::affine(map.matrix.scale(alpha)?, map.offset.clone())
            }
            DynamicFamily::Custom { name, eval } => {
                let eval = Arc::clone(eval);
                let op = CustomOp::new(format!("{name}@{iota}"), move |z| eval(z, iota));
                StaticOp::custom(op, self.dim, self.meta)
            }
        }
    }

    /// Zero of `T(·, ι)` for affine families.
    pub fn instantaneous_zero(&self, iota: f64) -> Option<Vector> {
        match &self.family {
            DynamicFamily::ModulatedAffine { map, modulation } => {
                let scaled = map.offset.scale(1.0 / modulation.at(iota)).ok()?;
                linalg::solve(&map.matrix, &scaled).ok()
            }
            DynamicFamily::Custom { .. } => None,
        }
    }
}

pub fn eval_dynamic(op: &DynamicOp, z: &Vector, iota: f64) -> Result<Vector> {
    op.eval(z, iota)
}

/// Identifier of the generator behind [`RngState`].
pub const RNG_ALGORITHM: &str = "chacha8/seed_from_u64/u53-uniform";

/// Explicit generator state: a seed plus the position in the ChaCha8 keystream.
///
/// Draws never mutate in place; every draw returns the advanced state, so parallel
/// replications only ever share immutable values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub position: u128,
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        Self { seed, position: 0 }
    }

    fn generator(&self) -> ChaCha8Rng {
        let mut g = ChaCha8Rng::seed_from_u64(self.seed);
        g.set_word_pos(self.position);
        g
    }

    fn advanced(&self, g: &ChaCha8Rng) -> Self {
        Self { seed: self.seed, position: g.get_word_pos() }
    }

    /// Uniform draw in `[0, 1)` from the top 53 bits of one `u64`.
    pub fn uniform(&self) -> (f64, RngState) {
        let mut g = self.generator();
        let u = (g.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
        (u, self.advanced(&g))
    }

    /// `n` standard normal draws by the Box-Muller transform.
    pub fn normals(&self, n: usize) -> (Vec<f64>, RngState) {
        let mut g = self.generator();
        let mut unit = || (g.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
        let mut out = Vec::with_capacity(n + 1);
        while out.len() < n {
            let u1 = 1.0 - unit(); // (0, 1]
            let u2 = unit();
            let r = (-2.0 * u1.ln()).sqrt();
            let t = 2.0 * std::f64::consts::PI * u2;
            out.push(r * t.cos());
            out.push(r * t.sin());
        }
        out.truncate(n);
        (out, self.advanced(&g))
    }
}

/// Distribution of the random realization `T_ξ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "sampler", rename_all = "snake_case")]
pub enum Sampler {
    /// Every realization is the mean operator.
    PointMass,
    /// `T_ξ(z) = ξ A z − b` with `ξ ~ U[lo, hi]`.
    UniformScale { map: AffineMap, lo: f64, hi: f64 },
    /// `T_ξ = T_i` with probability `weights[i]`.
    Mixture { weights: Vec<f64>, components: Vec<AffineMap> },
    /// `T_ξ(z) = A z − (b + σ g)` with `g ~ N(0, I)`.
    GaussianOffset { map: AffineMap, sigma: f64 },
}

/// A stochastic operator `T(z) = E[T_ξ(z)]`.
#[derive(Debug, Clone, PartialEq)]
pub struct StochasticOp {
    sampler: Sampler,
    mean: StaticOp,
    // metadata of the unscaled matrix for uniform-scale samplers
    base_meta: Option<OperatorMetadata>,
}

impl StochasticOp {
    pub fn point_mass(mean: StaticOp) -> Self {
        Self { sampler: Sampler::PointMass, mean, base_meta: None }
    }

    pub fn uniform_scale(map: AffineMap, lo: f64, hi: f64) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return Err(OperatorError::InvalidParameter(format!("uniform range [{lo}, {hi}]")));
        }
        let base = OperatorMetadata::from_spectral(linalg::spectral_bounds(&map.matrix)?);
        let mid = 0.5 * (lo + hi);
        let mean = StaticOp::affine(map.matrix.scale(mid)?, map.offset.clone())?;
        Ok(Self { sampler: Sampler::UniformScale { map, lo, hi }, mean, base_meta: Some(base) })
    }

    pub fn mixture(weights: Vec<f64>, components: Vec<AffineMap>) -> Result<Self> {
        if weights.is_empty() || weights.len() != components.len() {
            return Err(OperatorError::InvalidParameter(
                "mixture needs one weight per component".into(),
            ));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(OperatorError::InvalidParameter("mixture weights must be >= 0".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(OperatorError::InvalidParameter(format!(
                "mixture weights sum to {total}, expected 1"
            )));
        }
        let dim = components[0].dim();
        let mut a = Matrix::zeros(dim, dim)?;
        let mut b = Vector::zeros(dim)?;
        for (w, c) in weights.iter().zip(&components) {
            a = a.add(&c.matrix.scale(*w)?)?;
            b = b.axpy(*w, &c.offset)?;
        }
        let mean = StaticOp::affine(a, b)?;
        Ok(Self { sampler: Sampler::Mixture { weights, components }, mean, base_meta: None })
    }

    pub fn gaussian_offset(map: AffineMap, sigma: f64) -> Result<Self> {
        if !(sigma.is_finite() && sigma >= 0.0) {
            return Err(OperatorError::InvalidParameter(format!("sigma must be >= 0, got {sigma}")));
        }
        let mean = StaticOp::affine(map.matrix.clone(), map.offset.clone())?;
        Ok(Self { sampler: Sampler::GaussianOffset { map, sigma }, mean, base_meta: None })
    }

    pub fn sampler(&self) -> &Sampler {
        &self.sampler
    }

    pub fn meta(&self) -> &OperatorMetadata {
        self.mean.meta()
    }

    pub fn dim(&self) -> usize {
        self.mean.dim()
    }

    pub fn mean_operator(&self) -> &StaticOp {
        &self.mean
    }

    /// Draws one realization `T_ξ`.
    pub fn sample(&self, rng: RngState) -> Result<(StaticOp, RngState)> {
        match &self.sampler {
            Sampler::PointMass => Ok((self.mean.clone(), rng)),
            Sampler::UniformScale { map, lo, hi } => {
                let (u, next) = rng.uniform();
                let xi = lo + (hi - lo) * u;
                let scaled = AffineMap { matrix: map.matrix.scale(xi)?, offset: map.offset.clone() };
                let op = match self.base_meta {
                    Some(m) if xi >= 0.0 => StaticOp::affine_with_meta(
                        scaled,
                        OperatorMetadata { mu: xi * m.mu, lipschitz: xi * m.lipschitz, time_lipschitz: 0.0 },
                    ),
                    _ => StaticOp::affine(scaled.matrix, scaled.offset)?,
                };
                Ok((op, next))
            }
            Sampler::Mixture { weights, components } => {
                let (u, next) = rng.uniform();
                let mut acc = 0.0;
                let mut pick = components.len() - 1;
                for (i, w) in weights.iter().enumerate() {
                    acc += w;
                    if u < acc {
                        pick = i;
                        break;
                    }
                }
                let c = &components[pick];
                Ok((StaticOp::affine(c.matrix.clone(), c.offset.clone())?, next))
            }
            Sampler::GaussianOffset { map, sigma } => {
                let (g, next) = rng.normals(map.dim());
                let shifted = map.offset.zip_with(&Vector::new(g)?, |b, n| b + sigma * n)?;
                let op = StaticOp::affine_with_meta(
                    AffineMap { matrix: map.matrix.clone(), offset: shifted },
                    *self.mean.meta(),
                );
                Ok((op, next))
            }
        }
    }

    /// Exact `E‖T_ξ(z) − T(z)‖²`.
    pub fn variance_at(&self, z: &Vector) -> Result<f64> {
        match &self.sampler {
            Sampler::PointMass => Ok(0.0),
            Sampler::UniformScale { map, lo, hi } => {
                Ok((hi - lo).powi(2) / 12.0 * map.matrix.mul_vec(z)?.norm2_sq())
            }
            Sampler::Mixture { weights, components } => {
                let mean = self.mean.eval(z)?;
                let mut total = 0.0;
                for (w, c) in weights.iter().zip(components) {
                    total += w * c.apply(z)?.sub(&mean)?.norm2_sq();
                }
                Ok(total)
            }
            Sampler::GaussianOffset { map, sigma } => Ok(sigma * sigma * map.dim() as f64),
        }
    }

    /// Upper bound on the variance over the ball `‖z‖ ≤ radius`.
    pub fn variance_bound(&self, radius: f64) -> Result<f64> {
        match &self.sampler {
            Sampler::PointMass => Ok(0.0),
            Sampler::UniformScale { map, lo, hi } => {
                let l = linalg::largest_singular_value(&map.matrix);
                Ok((hi - lo).powi(2) / 12.0 * (l * radius).powi(2))
            }
            Sampler::Mixture { weights, components } => {
                let mean = self.mean.as_affine().expect("mixture mean is affine");
                let mut total = 0.0;
                for (w, c) in weights.iter().zip(components) {
                    let da = linalg::largest_singular_value(&c.matrix.sub(&mean.matrix)?);
                    let db = c.offset.distance(&mean.offset)?;
                    total += w * (da * radius + db).powi(2);
                }
                Ok(total)
            }
            Sampler::GaussianOffset { map, sigma } => Ok(sigma * sigma * map.dim() as f64),
        }
    }
}

pub fn sample_realization(op: &StochasticOp, rng: RngState) -> Result<(StaticOp, RngState)> {
    op.sample(rng)
}

pub fn mean_operator(op: &StochasticOp) -> StaticOp {
    op.mean.clone()
}

type CoupledFn = dyn Fn(&Vector, &Vector) -> Result<Vector> + Send + Sync;

/// `T₁(z, w) = A₁ z − B₁ w − c₁` and `T₂(w, z) = A₂ w − B₂ z − c₂`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineCoupling {
    pub own1: Matrix,
    pub cross1: Matrix,
    pub offset1: Vector,
    pub own2: Matrix,
    pub cross2: Matrix,
    pub offset2: Vector,
}

#[derive(Clone)]
pub enum CoupledKind {
    Affine(AffineCoupling),
    Custom { t1: Arc<CoupledFn>, t2: Arc<CoupledFn> },
}

impl fmt::Debug for CoupledKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CoupledKind::Affine(a) => f.debug_tuple("Affine").field(a).finish(),
            CoupledKind::Custom { .. } => f.write_str("Custom(..)"),
        }
    }
}

/// Two operators acting on a pair `(z, w)`, each monotone in its own argument.
///
/// `meta1.lipschitz` is the Lipschitz constant of `T₁` in the joint argument `(z, w)`;
/// `meta1.mu` is its strong monotonicity in `z` with `w` held fixed. Likewise for `T₂`.
#[derive(Debug, Clone)]
pub struct CoupledPair {
    kind: CoupledKind,
    meta1: OperatorMetadata,
    meta2: OperatorMetadata,
    dim1: usize,
    dim2: usize,
}

impl CoupledPair {
    pub fn affine(c: AffineCoupling) -> Result<Self> {
        let (n, m) = (c.offset1.dim(), c.offset2.dim());
        let shape_ok = c.own1.rows() == n
            && c.own1.cols() == n
            && c.cross1.rows() == n
            && c.cross1.cols() == m
            && c.own2.rows() == m
            && c.own2.cols() == m
            && c.cross2.rows() == m
            && c.cross2.cols() == n;
        if !shape_ok {
            return Err(OperatorError::InvalidParameter(format!(
                "coupled blocks inconsistent with dims ({n}, {m})"
            )));
        }
        let meta_for = |own: &Matrix, cross: &Matrix| -> Result<OperatorMetadata> {
            let mu = linalg::spectral_bounds(own)?.mu;
            let joint = own.hstack(&cross.scale(-1.0)?)?;
            let l = linalg::largest_singular_value(&joint);
            Ok(OperatorMetadata { mu: mu.min(l), lipschitz: l, time_lipschitz: 0.0 })
        };
        let meta1 = meta_for(&c.own1, &c.cross1)?;
        let meta2 = meta_for(&c.own2, &c.cross2)?;
        Ok(Self { kind: CoupledKind::Affine(c), meta1, meta2, dim1: n, dim2: m })
    }

    pub fn custom(
        t1: impl Fn(&Vector, &Vector) -> Result<Vector> + Send + Sync + 'static,
        t2: impl Fn(&Vector, &Vector) -> Result<Vector> + Send + Sync + 'static,
        dims: (usize, usize),
        meta1: OperatorMetadata,
        meta2: OperatorMetadata,
    ) -> Self {
        Self {
            kind: CoupledKind::Custom { t1: Arc::new(t1), t2: Arc::new(t2) },
            meta1,
            meta2,
            dim1: dims.0,
            dim2: dims.1,
        }
    }

    pub fn kind(&self) -> &CoupledKind {
        &self.kind
    }

    pub fn meta(&self) -> (&OperatorMetadata, &OperatorMetadata) {
        (&self.meta1, &self.meta2)
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.dim1, self.dim2)
    }

    fn check(&self, z: &Vector, w: &Vector) -> Result<()> {
        if z.dim() != self.dim1 {
            return Err(LinalgError::DimensionMismatch { expected: self.dim1, found: z.dim() }.into());
        }
        if w.dim() != self.dim2 {
            return Err(LinalgError::DimensionMismatch { expected: self.dim2, found: w.dim() }.into());
        }
        Ok(())
    }

    pub fn eval_t1(&self, z: &Vector, w: &Vector) -> Result<Vector> {
        self.check(z, w)?;
        let out = match &self.kind {
            CoupledKind::Affine(c) => c.own1.mul_vec(z)?.sub(&c.cross1.mul_vec(w)?)?.sub(&c.offset1)?,
            CoupledKind::Custom { t1, .. } => t1(z, w)?,
        };
        if out.dim() != self.dim1 {
            return Err(LinalgError::DimensionMismatch { expected: self.dim1, found: out.dim() }.into());
        }
        Ok(out)
    }

    pub fn eval_t2(&self, w: &Vector, z: &Vector) -> Result<Vector> {
        self.check(z, w)?;
        let out = match &self.kind {
            CoupledKind::Affine(c) => c.own2.mul_vec(w)?.sub(&c.cross2.mul_vec(z)?)?.sub(&c.offset2)?,
            CoupledKind::Custom { t2, .. } => t2(w, z)?,
        };
        if out.dim() != self.dim2 {
            return Err(LinalgError::DimensionMismatch { expected: self.dim2, found: out.dim() }.into());
        }
        Ok(out)
    }

    /// `T₁(·, w)` as a static operator.
    pub fn freeze_t1(&self, w: &Vector) -> Result<StaticOp> {
        match &self.kind {
            CoupledKind::Affine(c) => {
                StaticOp::affine(c.own1.clone(), c.cross1.mul_vec(w)?.add(&c.offset1)?)
            }
            CoupledKind::Custom { t1, .. } => {
                let (t1, w) = (Arc::clone(t1), w.clone());
                StaticOp::custom(CustomOp::new("t1", move |z| t1(z, &w)), self.dim1, self.meta1)
            }
        }
    }

    /// `T₂(·, z)` as a static operator.
    pub fn freeze_t2(&self, z: &Vector) -> Result<StaticOp> {
        match &self.kind {
            CoupledKind::Affine(c) => {
                StaticOp::affine(c.own2.clone(), c.cross2.mul_vec(z)?.add(&c.offset2)?)
            }
            CoupledKind::Custom { t2, .. } => {
                let (t2, z) = (Arc::clone(t2), z.clone());
                StaticOp::custom(CustomOp::new("t2", move |w| t2(w, &z)), self.dim2, self.meta2)
            }
        }
    }

    /// The joint zero of an affine coupling, from the block system
    /// `[A₁ −B₁; −B₂ A₂] [z; w] = [c₁; c₂]`.
    pub fn joint_zero(&self) -> Option<(Vector, Vector)> {
        let CoupledKind::Affine(c) = &self.kind else { return None };
        let top = c.own1.hstack(&c.cross1.scale(-1.0).ok()?).ok()?;
        let bottom = c.cross2.scale(-1.0).ok()?.hstack(&c.own2).ok()?;
        let block = top.vstack(&bottom).ok()?;
        let rhs = c.offset1.concat(&c.offset2);
        let sol = linalg::solve(&block, &rhs).ok()?;
        sol.split_at(self.dim1).ok()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(c: &[f64]) -> Vector {
        Vector::from_slice(c).unwrap()
    }

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(rows.iter().map(|r| r.to_vec()).collect()).unwrap()
    }

    fn section7_dynamic() -> DynamicOp {
        let map = AffineMap::new(Matrix::identity(1).unwrap(), v(&[1.0])).unwrap();
        let modulation = Modulation { base: 1.0, amplitude: 0.1, frequency: 1.0 };
        DynamicOp::modulated_affine(map, modulation, TimeGrid::new(0.0, 0.1, 500).unwrap()).unwrap()
    }

    fn section7_stochastic() -> StochasticOp {
        // ξζ + b with b = 1, stored as A z − (−1)
        let map = AffineMap::new(Matrix::identity(1).unwrap(), v(&[-1.0])).unwrap();
        StochasticOp::uniform_scale(map, 0.9, 1.1).unwrap()
    }

    #[test]
    fn eval_static_examples() {
        let op = StaticOp::affine(Matrix::diag(&[2.0, 1.0]).unwrap(), v(&[1.0, 0.0])).unwrap();
        assert_eq!(eval_static(&op, &v(&[1.0, 1.0])).unwrap(), v(&[1.0, 1.0]));
        let op = StaticOp::affine(Matrix::identity(2).unwrap(), v(&[0.0, 0.0])).unwrap();
        assert_eq!(eval_static(&op, &v(&[3.0, -2.0])).unwrap(), v(&[3.0, -2.0]));
        let op = StaticOp::affine(m(&[&[2.0, 1.0], &[0.0, 1.0]]), v(&[0.0, 0.0])).unwrap();
        assert_eq!(eval_static(&op, &v(&[1.0, 1.0])).unwrap(), v(&[3.0, 1.0]));
    }

    #[test]
    fn eval_static_dimension_mismatch() {
        let op = StaticOp::zero_operator(2).unwrap();
        assert!(matches!(
            op.eval(&v(&[1.0])),
            Err(OperatorError::Linalg(LinalgError::DimensionMismatch { expected: 2, found: 1 }))
        ));
    }

    #[test]
    fn separable_selection_and_domain() {
        let op = StaticOp::separable(SeparableFamily::SoftThreshold { weight: 1.0 }, 3).unwrap();
        assert_eq!(op.eval(&v(&[2.0, 0.0, -0.5])).unwrap(), v(&[1.0, 0.0, -1.0]));
        let fam = SeparableFamily::BoxProjection { lo: v(&[0.0]), hi: v(&[1.0]) };
        let op = StaticOp::separable(fam, 1).unwrap();
        assert_eq!(op.eval(&v(&[0.5])).unwrap(), v(&[0.0]));
        assert_eq!(op.eval(&v(&[2.0])), Err(OperatorError::OutsideDomain { coordinate: 0 }));
        let bad = SeparableFamily::BoxProjection { lo: v(&[1.0]), hi: v(&[0.0]) };
        assert!(StaticOp::separable(bad, 1).is_err());
    }

    #[test]
    fn metadata_invariant() {
        assert!(OperatorMetadata::new(2.0, 1.0, 0.0).is_err());
        assert!(OperatorMetadata::new(-1.0, 1.0, 0.0).is_ok());
        assert!(OperatorMetadata::new(1.0, -1.0, 0.0).is_err());
        let op = StaticOp::affine(m(&[&[2.0, 1.0], &[0.0, 1.0]]), v(&[0.0, 0.0])).unwrap();
        assert!(op.meta().mu <= op.meta().lipschitz);
    }

    #[test]
    fn eval_dynamic_examples() {
        let op = section7_dynamic();
        assert_eq!(eval_dynamic(&op, &v(&[2.0]), 0.0).unwrap(), v(&[1.0]));
        assert_eq!(eval_dynamic(&op, &v(&[0.0]), 0.0).unwrap(), v(&[-1.0]));
        // 1.1·1 − 1 = 0.1
        let out = eval_dynamic(&op, &v(&[1.0]), std::f64::consts::FRAC_PI_2).unwrap();
        assert!((out[0] - 0.1).abs() < 1e-15);
        assert!(eval_dynamic(&op, &v(&[1.0]), f64::NAN).is_err());
    }

    #[test]
    fn time_grid_has_no_drift() {
        let g = TimeGrid::new(0.0, 0.1, 10_000).unwrap();
        assert_eq!(g.time_at(0), 0.0);
        assert_eq!(g.time_at(9_999), 9_999.0 * 0.1);
        assert!(TimeGrid::new(0.0, 0.0, 1).is_err());
    }

    #[test]
    fn dynamic_time_lipschitz_envelope() {
        let op = section7_dynamic();
        assert!((op.meta().time_lipschitz - 0.1).abs() < 1e-12);
        let mut rng = RngState::new(3);
        for _ in 0..1000 {
            let (u1, r) = rng.uniform();
            let (u2, r) = r.uniform();
            let (u3, r) = r.uniform();
            rng = r;
            let z = v(&[10.0 * (2.0 * u1 - 1.0)]);
            let (t1, t2) = (20.0 * u2, 20.0 * u3);
            let diff = op.eval(&z, t1).unwrap().distance(&op.eval(&z, t2).unwrap()).unwrap();
            let bound = op.meta().time_lipschitz * z.norm2() * (t1 - t2).abs();
            assert!(diff <= bound + 1e-12, "{diff} > {bound}");
        }
    }

    #[test]
    fn instantaneous_zero_tracks_modulation() {
        let op = section7_dynamic();
        let t = std::f64::consts::FRAC_PI_2;
        let z = op.instantaneous_zero(t).unwrap();
        assert!((z[0] - 1.0 / 1.1).abs() < 1e-15);
    }

    #[test]
    fn uniform_sampler_mean() {
        let op = section7_stochastic();
        let mut rng = RngState::new(7);
        let n = 100_000;
        let mut sum = 0.0;
        for _ in 0..n {
            let (real, next) = sample_realization(&op, rng).unwrap();
            rng = next;
            sum += real.as_affine().unwrap().matrix.get(0, 0);
        }
        let mean = sum / n as f64;
        // standard error of U[0.9,1.1] mean at 1e5 draws is ~1.8e-4
        assert!((mean - 1.0).abs() < 1e-3, "mean {mean}");
    }

    #[test]
    fn point_mass_realizes_mean_exactly() {
        let mean = StaticOp::affine(Matrix::diag(&[2.0, 1.0]).unwrap(), v(&[1.0, 0.0])).unwrap();
        let op = StochasticOp::point_mass(mean.clone());
        let (real, next) = op.sample(RngState::new(1)).unwrap();
        assert_eq!(real, mean);
        assert_eq!(next, RngState::new(1));
        assert_eq!(op.variance_at(&v(&[3.0, 3.0])).unwrap(), 0.0);
    }

    #[test]
    fn seeded_sequences_are_identical() {
        let op = section7_stochastic();
        let run = || {
            let mut rng = RngState::new(42);
            (0..50)
                .map(|_| {
                    let (real, next) = op.sample(rng).unwrap();
                    rng = next;
                    real.as_affine().unwrap().matrix.get(0, 0).to_bits()
                })
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn mean_operator_examples() {
        let mean = mean_operator(&section7_stochastic());
        let affine = mean.as_affine().unwrap();
        assert!((affine.matrix.get(0, 0) - 1.0).abs() < 1e-15);
        assert_eq!(affine.offset, v(&[-1.0]));
        assert_eq!(affine.zero().unwrap(), v(&[-1.0]));

        let a1 = AffineMap::new(Matrix::diag(&[2.0, 0.0]).unwrap(), v(&[1.0, 2.0])).unwrap();
        let a2 = AffineMap::new(Matrix::diag(&[0.0, 4.0]).unwrap(), v(&[3.0, 0.0])).unwrap();
        let mix = StochasticOp::mixture(vec![0.5, 0.5], vec![a1, a2]).unwrap();
        let mean = mix.mean_operator().as_affine().unwrap();
        assert_eq!(mean.matrix, Matrix::diag(&[1.0, 2.0]).unwrap());
        assert_eq!(mean.offset, v(&[2.0, 1.0]));
        assert!(StochasticOp::mixture(vec![0.5, 0.6], mix_components()).is_err());
    }

    fn mix_components() -> Vec<AffineMap> {
        let a = AffineMap::new(Matrix::identity(1).unwrap(), v(&[0.0])).unwrap();
        vec![a.clone(), a]
    }

    #[test]
    fn stochastic_unbiasedness() {
        // law of large numbers at 1e5 samples, 5-sigma band from the exact variance
        let op = section7_stochastic();
        let z = v(&[2.5]);
        let target = op.mean_operator().eval(&z).unwrap()[0];
        let sd = op.variance_at(&z).unwrap().sqrt();
        let n = 100_000;
        let mut rng = RngState::new(11);
        let mut sum = 0.0;
        for _ in 0..n {
            let (real, next) = op.sample(rng).unwrap();
            rng = next;
            sum += real.eval(&z).unwrap()[0];
        }
        let mean = sum / n as f64;
        assert!((mean - target).abs() <= 5.0 * sd / (n as f64).sqrt());
    }

    #[test]
    fn gaussian_offset_unbiased() {
        let map = AffineMap::new(Matrix::identity(2).unwrap(), v(&[1.0, -1.0])).unwrap();
        let op = StochasticOp::gaussian_offset(map, 0.5).unwrap();
        let z = v(&[0.3, 0.7]);
        let target = op.mean_operator().eval(&z).unwrap();
        let sd = (op.variance_at(&z).unwrap() / 2.0).sqrt();
        let n = 100_000;
        let mut rng = RngState::new(5);
        let mut sum = [0.0; 2];
        for _ in 0..n {
            let (real, next) = op.sample(rng).unwrap();
            rng = next;
            let t = real.eval(&z).unwrap();
            sum[0] += t[0];
            sum[1] += t[1];
        }
        for i in 0..2 {
            let mean = sum[i] / n as f64;
            assert!((mean - target[i]).abs() <= 5.0 * sd / (n as f64).sqrt());
        }
    }

    #[test]
    fn mixture_variance_bound_covers_pointwise_variance() {
        let a1 = AffineMap::new(Matrix::diag(&[2.0, 0.5]).unwrap(), v(&[1.0, 2.0])).unwrap();
        let a2 = AffineMap::new(Matrix::diag(&[1.0, 3.0]).unwrap(), v(&[-1.0, 0.0])).unwrap();
        let op = StochasticOp::mixture(vec![0.3, 0.7], vec![a1, a2]).unwrap();
        let bound = op.variance_bound(2.0).unwrap();
        for z in [v(&[2.0, 0.0]), v(&[0.0, -2.0]), v(&[1.0, 1.0]), v(&[0.0, 0.0])] {
            assert!(op.variance_at(&z).unwrap() <= bound + 1e-12);
        }
    }

    #[test]
    fn coupled_joint_zero_section7() {
        let c = AffineCoupling {
            own1: Matrix::diag(&[2.0, 1.0]).unwrap(),
            cross1: Matrix::identity(2).unwrap(),
            offset1: Vector::zeros(2).unwrap(),
            own2: Matrix::diag(&[1.0, 2.0]).unwrap(),
            cross2: Matrix::identity(2).unwrap(),
            offset2: Vector::zeros(2).unwrap(),
        };
        let pair = CoupledPair::affine(c).unwrap();
        let (z, w) = pair.joint_zero().unwrap();
        assert_eq!(z.norm2(), 0.0);
        assert_eq!(w.norm2(), 0.0);
        let (m1, m2) = pair.meta();
        assert!((m1.mu - 1.0).abs() < 1e-12);
        assert!((m1.lipschitz - 5f64.sqrt()).abs() < 1e-12);
        assert!((m2.lipschitz - 5f64.sqrt()).abs() < 1e-12);
        let t1 = pair.eval_t1(&v(&[1.0, 1.0]), &v(&[1.0, 1.0])).unwrap();
        assert_eq!(t1, v(&[1.0, 0.0]));
        let frozen = pair.freeze_t1(&v(&[1.0, 1.0])).unwrap();
        assert_eq!(frozen.eval(&v(&[1.0, 1.0])).unwrap(), t1);
    }

    fn random_affine(rng: &mut RngState, n: usize, shift: f64) -> StaticOp {
        let mut draw = || {
            let (u, next) = rng.uniform();
            *rng = next;
            2.0 * u - 1.0
        };
        let b: Matrix = Matrix::new(n, n, (0..n * n).map(|_| 2.0 * draw()).collect()).unwrap();
        // BᵀB + shift·I is symmetric positive semidefinite; add a skew part
        let bt = b.transpose();
        let mut rows = vec![vec![0.0; n]; n];
        for (i, row) in rows.iter_mut().enumerate() {
            for (j, e) in row.iter_mut().enumerate() {
                *e = (0..n).map(|k| bt.get(i, k) * b.get(k, j)).sum::<f64>()
                    + if i == j { shift } else { 0.0 };
            }
        }
        let sym = Matrix::from_rows(rows).unwrap();
        let s = Matrix::new(n, n, (0..n * n).map(|_| draw()).collect()).unwrap();
        let skew = s.sub(&s.transpose()).unwrap();
        let a = sym.add(&skew).unwrap();
        let offset = Vector::new((0..n).map(|_| draw()).collect()).unwrap();
        StaticOp::affine(a, offset).unwrap()
    }

    #[test]
    fn affine_monotonicity_and_lipschitz_randomized() {
        let mut rng = RngState::new(99);
        for trial in 0..20 {
            let n = 1 + trial % 5;
            let shift = if trial % 2 == 0 { 0.0 } else { 0.5 };
            let op = random_affine(&mut rng, n, shift);
            assert!(op.meta().mu >= -1e-12);
            check_metadata(&op, 1000, 5.0, trial as u64).unwrap();
        }
    }

    #[test]
    fn metadata_check_catches_false_claims() {
        let op = StaticOp::affine(Matrix::diag(&[1.0, 3.0]).unwrap(), v(&[0.0, 0.0])).unwrap();
        let lying = StaticOp::custom(
            CustomOp::new("diag", move |z| Ok(op.eval(z)?)),
            2,
            OperatorMetadata::new(1.0, 2.0, 0.0).unwrap(),
        )
        .unwrap();
        assert!(matches!(
            check_metadata(&lying, 1000, 1.0, 0),
            Err(OperatorError::MetadataViolated(_))
        ));
    }
}
