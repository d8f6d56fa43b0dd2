//! TOML experiment configuration.
//!
//! Loading walks the document by hand so that every problem is reported with its
//! dotted key, not only the first one serde would hit. See the README for the schema.

use std::fmt;
use std::path::{Path, PathBuf};

use thiserror::Error;
use toml::{Table, Value};

use crate::linalg::{Matrix, Vector};
use crate::operators::{AffineCoupling, AffineMap, CoupledPair, DynamicOp, Modulation, StochasticOp, TimeGrid};
use crate::schedules::{self, Schedule};
use crate::solvers::{ResolventMode, StopRule};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigIssue {
    pub key: String,
    pub message: String,
}

impl fmt::Display for ConfigIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.key, self.message)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("malformed TOML: {0}")]
    Syntax(String),
    #[error("{}", format_issues(.0))]
    Invalid(Vec<ConfigIssue>),
}

fn format_issues(issues: &[ConfigIssue]) -> String {
    let mut s = format!("{} configuration error(s)", issues.len());
    for i in issues {
        s.push_str("\n  ");
        s.push_str(&i.to_string());
    }
    s
}

impl ConfigError {
    pub fn issues(&self) -> &[ConfigIssue] {
        match self {
            ConfigError::Invalid(v) => v,
            _ => &[],
        }
    }
}

/// How the configured `offset` enters the operator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OffsetSign {
    /// `T(ζ) = Aζ − offset`
    #[default]
    Minus,
    /// `T(ζ) = Aζ + offset`, stored internally as `b = −offset`
    Plus,
}

impl OffsetSign {
    fn as_str(self) -> &'static str {
        match self {
            OffsetSign::Minus => "minus",
            OffsetSign::Plus => "plus",
        }
    }

    pub fn apply(self, offset: &Vector) -> Vector {
        match self {
            OffsetSign::Minus => offset.clone(),
            OffsetSign::Plus => offset.map(|x| -x).expect("negation keeps entries finite"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SamplerConfig {
    PointMass,
    UniformScale { lo: f64, hi: f64 },
    GaussianOffset { sigma: f64 },
    /// Component `i` is `scales[i]·A` with the shared offset.
    Mixture { weights: Vec<f64>, scales: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoupledConfig {
    pub own1: Matrix,
    pub cross1: Matrix,
    pub offset1: Vector,
    pub own2: Matrix,
    pub cross2: Matrix,
    pub offset2: Vector,
    pub initial: Vector,
    pub initial_partner: Vector,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ProblemConfig {
    Dynamic {
        matrix: Matrix,
        offset: Vector,
        offset_sign: OffsetSign,
        modulation: Modulation,
        initial: Vector,
    },
    Stochastic {
        matrix: Matrix,
        offset: Vector,
        offset_sign: OffsetSign,
        sampler: SamplerConfig,
        initial: Vector,
    },
    Coupled(CoupledConfig),
}

impl ProblemConfig {
    pub fn kind(&self) -> &'static str {
        match self {
            ProblemConfig::Dynamic { .. } => "dynamic",
            ProblemConfig::Stochastic { .. } => "stochastic",
            ProblemConfig::Coupled(_) => "coupled",
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Outputs {
    pub trace: Option<PathBuf>,
    pub summary: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub name: Option<String>,
    pub problem: ProblemConfig,
    pub schedule: Schedule,
    pub stop: StopRule,
    pub time_grid: Option<TimeGrid>,
    pub seed: Option<u64>,
    pub resolvent_mode: ResolventMode,
    pub n_seeds: Option<usize>,
    /// Accepted and echoed; no update uses it.
    pub lambda: Option<f64>,
    /// Weight `C` of the error budget.
    pub budget_c: f64,
    /// Distance target for the bound predictions; `stop.epsilon` when absent.
    pub bound_epsilon: Option<f64>,
    pub outputs: Outputs,
}

/// Operators ready for a solver.
#[derive(Debug, Clone)]
pub enum Problem {
    Dynamic { op: DynamicOp, initial: Vector },
    Stochastic { op: StochasticOp, initial: Vector, seed: u64 },
    Coupled { pair: CoupledPair, initial: Vector, partner: Vector },
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig, ConfigError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ConfigError::Io { path: path.to_path_buf(), message: e.to_string() })?;
    parse_config(&text)
}

pub fn parse_config(text: &str) -> Result<ExperimentConfig, ConfigError> {
    let table: Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Syntax(e.to_string()))?;
    let mut w = Walker::default();
    let cfg = w.config(&table);
    match cfg {
        Some(c) if w.issues.is_empty() => {
            let issues = c.semantic_issues();
            if issues.is_empty() {
                Ok(c)
            } else {
                Err(ConfigError::Invalid(issues))
            }
        }
        _ => Err(ConfigError::Invalid(w.issues)),
    }
}

#[derive(Default)]
struct Walker {
    issues: Vec<ConfigIssue>,
}

fn join(path: &str, key: &str) -> String {
    if path.is_empty() {
        key.to_string()
    } else {
        format!("{path}.{key}")
    }
}

fn type_name(v: &Value) -> &'static str {
    match v {
        Value::String(_) => "string",
        Value::Integer(_) => "integer",
        Value::Float(_) => "float",
        Value::Boolean(_) => "boolean",
        Value::Datetime(_) => "datetime",
        Value::Array(_) => "array",
        Value::Table(_) => "table",
    }
}

fn as_f64(v: &Value) -> Option<f64> {
    match v {
        Value::Float(x) => Some(*x),
        Value::Integer(i) => Some(*i as f64),
        _ => None,
    }
}

impl Walker {
    fn issue(&mut self, key: impl Into<String>, message: impl Into<String>) {
        self.issues.push(ConfigIssue { key: key.into(), message: message.into() });
    }

    fn get<'a>(&mut self, t: &'a Table, path: &str, key: &str, required: bool) -> Option<&'a Value> {
        let v = t.get(key);
        if v.is_none() && required {
            self.issue(join(path, key), "missing required key");
        }
        v
    }

    fn unknown(&mut self, t: &Table, path: &str, allowed: &[&str]) {
        for k in t.keys() {
            if !allowed.contains(&k.as_str()) {
                self.issue(join(path, k), format!("unknown key (expected one of: {})", allowed.join(", ")));
            }
        }
    }

    fn table<'a>(&mut self, t: &'a Table, path: &str, key: &str, required: bool) -> Option<&'a Table> {
        match self.get(t, path, key, required)? {
            Value::Table(x) => Some(x),
            other => {
                self.issue(join(path, key), format!("expected table, found {}", type_name(other)));
                None
            }
        }
    }

    fn float(&mut self, t: &Table, path: &str, key: &str, required: bool) -> Option<f64> {
        let v = self.get(t, path, key, required)?;
        let x = as_f64(v);
        if x.is_none() {
            self.issue(join(path, key), format!("expected number, found {}", type_name(v)));
        }
        x
    }

    fn uint(&mut self, t: &Table, path: &str, key: &str, required: bool) -> Option<u64> {
        match self.get(t, path, key, required)? {
            Value::Integer(i) if *i >= 0 => Some(*i as u64),
            Value::Integer(i) => {
                self.issue(join(path, key), format!("expected nonnegative integer, found {i}"));
                None
            }
            other => {
                self.issue(join(path, key), format!("expected integer, found {}", type_name(other)));
                None
            }
        }
    }

    fn string<'a>(&mut self, t: &'a Table, path: &str, key: &str, required: bool) -> Option<&'a str> {
        match self.get(t, path, key, required)? {
            Value::String(s) => Some(s),
            other => {
                self.issue(join(path, key), format!("expected string, found {}", type_name(other)));
                None
            }
        }
    }

    fn floats(&mut self, t: &Table, path: &str, key: &str, required: bool) -> Option<Vec<f64>> {
        let v = self.get(t, path, key, required)?;
        let parsed = match v {
            Value::Array(a) => a.iter().map(as_f64).collect::<Option<Vec<f64>>>(),
            _ => None,
        };
        if parsed.is_none() {
            self.issue(join(path, key), format!("expected array of numbers, found {}", type_name(v)));
        }
        parsed
    }

    fn vector(&mut self, t: &Table, path: &str, key: &str, required: bool) -> Option<Vector> {
        let raw = self.floats(t, path, key, required)?;
        match Vector::new(raw) {
            Ok(v) => Some(v),
            Err(e) => {
                self.issue(join(path, key), e.to_string());
                None
            }
        }
    }

    fn matrix(&mut self, t: &Table, path: &str, key: &str, required: bool) -> Option<Matrix> {
        let v = self.get(t, path, key, required)?;
        let rows = match v {
            Value::Array(a) => a
                .iter()
                .map(|r| match r {
                    Value::Array(xs) => xs.iter().map(as_f64).collect::<Option<Vec<f64>>>(),
                    _ => None,
                })
                .collect::<Option<Vec<Vec<f64>>>>(),
            _ => None,
        };
        let Some(rows) = rows else {
            self.issue(join(path, key), "expected array of arrays of numbers");
            return None;
        };
        match Matrix::from_rows(rows) {
            Ok(m) if m.is_square() => Some(m),
            Ok(m) => {
                self.issue(join(path, key), format!("matrix must be square, got {}x{}", m.rows(), m.cols()));
                None
            }
            Err(e) => {
                self.issue(join(path, key), e.to_string());
                None
            }
        }
    }

    fn offset_sign(&mut self, t: &Table, path: &str) -> Option<OffsetSign> {
        match self.string(t, path, "offset_sign", false) {
            None => Some(OffsetSign::Minus),
            Some("minus") => Some(OffsetSign::Minus),
            Some("plus") => Some(OffsetSign::Plus),
            Some(other) => {
                self.issue(join(path, "offset_sign"), format!("expected \"minus\" or \"plus\", found \"{other}\""));
                None
            }
        }
    }

    fn config(&mut self, t: &Table) -> Option<ExperimentConfig> {
        self.unknown(
            t,
            "",
            &[
                "name", "problem", "schedule", "stop", "time_grid", "seed", "resolvent_mode", "n_seeds", "lambda",
                "bounds", "outputs",
            ],
        );
        let name = self.string(t, "", "name", false).map(str::to_string);
        let problem = self.table(t, "", "problem", true).and_then(|p| self.problem(p));
        let schedule = self.table(t, "", "schedule", true).and_then(|s| self.schedule(s));
        let stop = self.table(t, "", "stop", true).and_then(|s| self.stop(s));
        let time_grid = match self.table(t, "", "time_grid", false) {
            Some(g) => Some(self.time_grid(g)?),
            None => None,
        };
        let seed = self.uint(t, "", "seed", false);
        let resolvent_mode = match self.string(t, "", "resolvent_mode", false) {
            None | Some("mean") => ResolventMode::Mean,
            Some("sampled") => ResolventMode::Sampled,
            Some(other) => {
                self.issue("resolvent_mode", format!("expected \"mean\" or \"sampled\", found \"{other}\""));
                ResolventMode::Mean
            }
        };
        let n_seeds = self.uint(t, "", "n_seeds", false).map(|n| n as usize);
        let lambda = self.float(t, "", "lambda", false);
        let (budget_c, bound_epsilon) = match self.table(t, "", "bounds", false) {
            Some(b) => {
                self.unknown(b, "bounds", &["c", "epsilon"]);
                (self.float(b, "bounds", "c", false).unwrap_or(1.0), self.float(b, "bounds", "epsilon", false))
            }
            None => (1.0, None),
        };
        let outputs = match self.table(t, "", "outputs", false) {
            Some(o) => {
                self.unknown(o, "outputs", &["trace", "summary"]);
                Outputs {
                    trace: self.string(o, "outputs", "trace", false).map(PathBuf::from),
                    summary: self.string(o, "outputs", "summary", false).map(PathBuf::from),
                }
            }
            None => Outputs::default(),
        };
        Some(ExperimentConfig {
            name,
            problem: problem?,
            schedule: schedule?,
            stop: stop?,
            time_grid,
            seed,
            resolvent_mode,
            n_seeds,
            lambda,
            budget_c,
            bound_epsilon,
            outputs,
        })
    }

    fn problem(&mut self, p: &Table) -> Option<ProblemConfig> {
        let path = "problem";
        let kind = self.string(p, path, "kind", true)?;
        match kind {
            "dynamic" => {
                self.unknown(p, path, &["kind", "matrix", "offset", "offset_sign", "modulation", "initial"]);
                let matrix = self.matrix(p, path, "matrix", true);
                let offset = self.vector(p, path, "offset", true);
                let offset_sign = self.offset_sign(p, path);
                let initial = self.vector(p, path, "initial", true);
                let modulation = match self.table(p, path, "modulation", false) {
                    Some(m) => {
                        let mp = "problem.modulation";
                        self.unknown(m, mp, &["base", "amplitude", "frequency"]);
                        let base = self.float(m, mp, "base", true);
                        let amplitude = self.float(m, mp, "amplitude", false).unwrap_or(0.0);
                        let frequency = self.float(m, mp, "frequency", false).unwrap_or(0.0);
                        Some(Modulation { base: base?, amplitude, frequency })
                    }
                    None => Some(Modulation::constant(1.0)),
                };
                Some(ProblemConfig::Dynamic {
                    matrix: matrix?,
                    offset: offset?,
                    offset_sign: offset_sign?,
                    modulation: modulation?,
                    initial: initial?,
                })
            }
            "stochastic" => {
                self.unknown(p, path, &["kind", "matrix", "offset", "offset_sign", "sampler", "initial"]);
                let matrix = self.matrix(p, path, "matrix", true);
                let offset = self.vector(p, path, "offset", true);
                let offset_sign = self.offset_sign(p, path);
                let initial = self.vector(p, path, "initial", true);
                let sampler = self.table(p, path, "sampler", true).and_then(|s| self.sampler(s));
                Some(ProblemConfig::Stochastic {
                    matrix: matrix?,
                    offset: offset?,
                    offset_sign: offset_sign?,
                    sampler: sampler?,
                    initial: initial?,
                })
            }
            "coupled" => {
                self.unknown(
                    p,
                    path,
                    &["kind", "own1", "cross1", "offset1", "own2", "cross2", "offset2", "initial", "initial_partner"],
                );
                let own1 = self.matrix(p, path, "own1", true);
                let cross1 = self.matrix(p, path, "cross1", true);
                let offset1 = self.vector(p, path, "offset1", true);
                let own2 = self.matrix(p, path, "own2", true);
                let cross2 = self.matrix(p, path, "cross2", true);
                let offset2 = self.vector(p, path, "offset2", true);
                let initial = self.vector(p, path, "initial", true);
                let initial_partner = self.vector(p, path, "initial_partner", true);
                Some(ProblemConfig::Coupled(CoupledConfig {
                    own1: own1?,
                    cross1: cross1?,
                    offset1: offset1?,
                    own2: own2?,
                    cross2: cross2?,
                    offset2: offset2?,
                    initial: initial?,
                    initial_partner: initial_partner?,
                }))
            }
            other => {
                self.issue("problem.kind", format!("expected dynamic, stochastic, or coupled, found \"{other}\""));
                None
            }
        }
    }

    fn sampler(&mut self, s: &Table) -> Option<SamplerConfig> {
        let path = "problem.sampler";
        match self.string(s, path, "kind", true)? {
            "point_mass" => {
                self.unknown(s, path, &["kind"]);
                Some(SamplerConfig::PointMass)
            }
            "uniform_scale" => {
                self.unknown(s, path, &["kind", "lo", "hi"]);
                let lo = self.float(s, path, "lo", true);
                let hi = self.float(s, path, "hi", true);
                Some(SamplerConfig::UniformScale { lo: lo?, hi: hi? })
            }
            "gaussian_offset" => {
                self.unknown(s, path, &["kind", "sigma"]);
                Some(SamplerConfig::GaussianOffset { sigma: self.float(s, path, "sigma", true)? })
            }
            "mixture" => {
                self.unknown(s, path, &["kind", "weights", "scales"]);
                let weights = self.floats(s, path, "weights", true);
                let scales = self.floats(s, path, "scales", true);
                Some(SamplerConfig::Mixture { weights: weights?, scales: scales? })
            }
            other => {
                self.issue(
                    join(path, "kind"),
                    format!("expected point_mass, uniform_scale, gaussian_offset, or mixture, found \"{other}\""),
                );
                None
            }
        }
    }

    fn schedule(&mut self, s: &Table) -> Option<Schedule> {
        let path = "schedule";
        let parsed = match self.string(s, path, "kind", true)? {
            "harmonic" => {
                self.unknown(s, path, &["kind", "offset"]);
                Schedule::Harmonic { offset: self.uint(s, path, "offset", false).unwrap_or(1) }
            }
            "power" => {
                self.unknown(s, path, &["kind", "theta", "beta"]);
                let theta = self.float(s, path, "theta", true);
                let beta = self.float(s, path, "beta", true);
                Schedule::Power { theta: theta?, beta: beta? }
            }
            "constant" => {
                self.unknown(s, path, &["kind", "gamma"]);
                Schedule::Constant { gamma: self.float(s, path, "gamma", true)? }
            }
            other => {
                self.issue("schedule.kind", format!("expected harmonic, power, or constant, found \"{other}\""));
                return None;
            }
        };
        if let Err(e) = parsed.validate() {
            let key = match parsed {
                Schedule::Harmonic { .. } => "schedule.offset",
                Schedule::Power { .. } => "schedule.theta",
                Schedule::Constant { .. } => "schedule.gamma",
            };
            self.issue(key, e.to_string());
            return None;
        }
        Some(parsed)
    }

    fn stop(&mut self, s: &Table) -> Option<StopRule> {
        self.unknown(s, "stop", &["epsilon", "max_iters"]);
        let epsilon = self.float(s, "stop", "epsilon", true);
        let max_iters = self.uint(s, "stop", "max_iters", true);
        let (epsilon, max_iters) = (epsilon?, max_iters? as usize);
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            self.issue("stop.epsilon", format!("must be positive, got {epsilon}"));
        }
        if max_iters == 0 {
            self.issue("stop.max_iters", "must be at least 1");
        }
        Some(StopRule { epsilon, max_iters })
    }

    fn time_grid(&mut self, g: &Table) -> Option<TimeGrid> {
        self.unknown(g, "time_grid", &["iota0", "delta", "count"]);
        let iota0 = self.float(g, "time_grid", "iota0", false).unwrap_or(0.0);
        let delta = self.float(g, "time_grid", "delta", true);
        let count = self.uint(g, "time_grid", "count", true);
        match TimeGrid::new(iota0, delta?, count? as usize) {
            Ok(grid) => Some(grid),
            Err(e) => {
                self.issue("time_grid", e.to_string());
                None
            }
        }
    }
}

fn dim_issue(issues: &mut Vec<ConfigIssue>, key: &str, expected: usize, found: usize) {
    if expected != found {
        issues.push(ConfigIssue { key: key.into(), message: format!("dimension {found}, expected {expected}") });
    }
}

impl ExperimentConfig {
    pub fn bound_epsilon(&self) -> f64 {
        self.bound_epsilon.unwrap_or(self.stop.epsilon)
    }

    /// Cross-field checks, all collected.
    fn semantic_issues(&self) -> Vec<ConfigIssue> {
        let mut issues = Vec::new();
        let mut push = |key: &str, message: String| issues.push(ConfigIssue { key: key.into(), message });
        match &self.problem {
            ProblemConfig::Dynamic { .. } => match &self.time_grid {
                None => push("time_grid", "required for dynamic problems".into()),
                Some(g) if g.count < self.stop.max_iters => push(
                    "time_grid.count",
                    format!("grid has {} points but stop.max_iters is {}", g.count, self.stop.max_iters),
                ),
                _ => {}
            },
            ProblemConfig::Stochastic { .. } => {
                if self.seed.is_none() {
                    push("seed", "required for stochastic problems".into());
                }
            }
            ProblemConfig::Coupled(_) => {}
        }
        if !matches!(self.problem, ProblemConfig::Dynamic { .. }) && self.time_grid.is_some() {
            push("time_grid", "only dynamic problems take a time grid".into());
        }
        if let Some(seed) = self.seed {
            if seed > i64::MAX as u64 {
                push("seed", "must fit in a signed 64-bit integer".into());
            }
        }
        if let Some(n) = self.n_seeds {
            if n == 0 {
                push("n_seeds", "must be at least 1".into());
            }
        }
        if let Some(l) = self.lambda {
            if !l.is_finite() {
                push("lambda", "must be finite".into());
            }
        }
        if !(self.budget_c > 0.0 && self.budget_c.is_finite()) {
            push("bounds.c", format!("must be positive, got {}", self.budget_c));
        }
        if let Some(e) = self.bound_epsilon {
            if !(e > 0.0 && e.is_finite()) {
                push("bounds.epsilon", format!("must be positive, got {e}"));
            }
        }
        drop(push);
        issues.extend(self.dimension_issues());
        if issues.is_empty() {
            if let Err(e) = self.build() {
                issues.extend(e.issues().iter().cloned());
            }
        }
        issues
    }

    fn dimension_issues(&self) -> Vec<ConfigIssue> {
        let mut issues = Vec::new();
        match &self.problem {
            ProblemConfig::Dynamic { matrix, offset, initial, .. }
            | ProblemConfig::Stochastic { matrix, offset, initial, .. } => {
                dim_issue(&mut issues, "problem.offset", matrix.rows(), offset.dim());
                dim_issue(&mut issues, "problem.initial", matrix.rows(), initial.dim());
            }
            ProblemConfig::Coupled(c) => {
                let (n, m) = (c.own1.rows(), c.own2.rows());
                dim_issue(&mut issues, "problem.offset1", n, c.offset1.dim());
                dim_issue(&mut issues, "problem.initial", n, c.initial.dim());
                dim_issue(&mut issues, "problem.offset2", m, c.offset2.dim());
                dim_issue(&mut issues, "problem.initial_partner", m, c.initial_partner.dim());
                if c.cross1.rows() != n || c.cross1.cols() != m {
                    issues.push(ConfigIssue { key: "problem.cross1".into(), message: format!("must be {n}x{m}") });
                }
                if c.cross2.rows() != m || c.cross2.cols() != n {
                    issues.push(ConfigIssue { key: "problem.cross2".into(), message: format!("must be {m}x{n}") });
                }
            }
        }
        issues
    }

    /// Constructs the operators; failures carry the config key at fault.
    pub fn build(&self) -> Result<Problem, ConfigError> {
        let fail = |key: &str, message: String| ConfigError::Invalid(vec![ConfigIssue { key: key.into(), message }]);
        match &self.problem {
            ProblemConfig::Dynamic { matrix, offset, offset_sign, modulation, initial } => {
                let grid = self.time_grid.ok_or_else(|| fail("time_grid", "required for dynamic problems".into()))?;
                let map = AffineMap::new(matrix.clone(), offset_sign.apply(offset))
                    .map_err(|e| fail("problem.matrix", e.to_string()))?;
                let op = DynamicOp::modulated_affine(map, *modulation, grid)
                    .map_err(|e| fail("problem.modulation", e.to_string()))?;
                Ok(Problem::Dynamic { op, initial: initial.clone() })
            }
            ProblemConfig::Stochastic { matrix, offset, offset_sign, sampler, initial } => {
                let b = offset_sign.apply(offset);
                let map = AffineMap::new(matrix.clone(), b.clone()).map_err(|e| fail("problem.matrix", e.to_string()))?;
                let op = match sampler {
                    SamplerConfig::PointMass => crate::operators::StaticOp::affine(matrix.clone(), b)
                        .map(StochasticOp::point_mass),
                    SamplerConfig::UniformScale { lo, hi } => StochasticOp::uniform_scale(map, *lo, *hi),
                    SamplerConfig::GaussianOffset { sigma } => StochasticOp::gaussian_offset(map, *sigma),
                    SamplerConfig::Mixture { weights, scales } => {
                        if weights.len() != scales.len() {
                            return Err(fail("problem.sampler.scales", "needs one scale per weight".into()));
                        }
                        let comps = scales
                            .iter()
                            .map(|s| Ok(AffineMap::new(matrix.scale(*s)?, b.clone())?))
                            .collect::<crate::operators::Result<Vec<_>>>()
                            .map_err(|e| fail("problem.sampler.scales", e.to_string()))?;
                        StochasticOp::mixture(weights.clone(), comps)
                    }
                }
                .map_err(|e| fail("problem.sampler", e.to_string()))?;
                let seed = self.seed.ok_or_else(|| fail("seed", "required for stochastic problems".into()))?;
                Ok(Problem::Stochastic { op, initial: initial.clone(), seed })
            }
            ProblemConfig::Coupled(c) => {
                let pair = CoupledPair::affine(AffineCoupling {
                    own1: c.own1.clone(),
                    cross1: c.cross1.clone(),
                    offset1: c.offset1.clone(),
                    own2: c.own2.clone(),
                    cross2: c.cross2.clone(),
                    offset2: c.offset2.clone(),
                })
                .map_err(|e| fail("problem", e.to_string()))?;
                if let Some(gamma) = self.schedule.constant_step() {
                    let (m1, m2) = pair.meta();
                    match schedules::coupled_max_step(m1.mu, m1.lipschitz, m2.mu, m2.lipschitz) {
                        Ok(cap) if gamma > cap * (1.0 + 1e-12) => {
                            return Err(fail(
                                "schedule.gamma",
                                format!("{gamma} exceeds min(2μ₁/L₁², 2μ₂/L₂²) = {cap}"),
                            ))
                        }
                        Ok(_) => {}
                        Err(e) => return Err(fail("schedule.gamma", format!("no admissible constant step: {e}"))),
                    }
                }
                Ok(Problem::Coupled { pair, initial: c.initial.clone(), partner: c.initial_partner.clone() })
            }
        }
    }

    /// Emits TOML that [`parse_config`] reads back to an equal config.
    pub fn to_toml(&self) -> String {
        let mut t = Table::new();
        if let Some(n) = &self.name {
            t.insert("name".into(), Value::String(n.clone()));
        }
        t.insert("problem".into(), Value::Table(problem_table(&self.problem)));
        t.insert("schedule".into(), Value::Table(schedule_table(&self.schedule)));
        let mut stop = Table::new();
        stop.insert("epsilon".into(), Value::Float(self.stop.epsilon));
        stop.insert("max_iters".into(), Value::Integer(self.stop.max_iters as i64));
        t.insert("stop".into(), Value::Table(stop));
        if let Some(g) = &self.time_grid {
            let mut gt = Table::new();
            gt.insert("iota0".into(), Value::Float(g.iota0));
            gt.insert("delta".into(), Value::Float(g.delta));
            gt.insert("count".into(), Value::Integer(g.count as i64));
            t.insert("time_grid".into(), Value::Table(gt));
        }
        if let Some(s) = self.seed {
            t.insert("seed".into(), Value::Integer(s as i64));
        }
        let mode = match self.resolvent_mode {
            ResolventMode::Mean => "mean",
            ResolventMode::Sampled => "sampled",
        };
        t.insert("resolvent_mode".into(), Value::String(mode.into()));
        if let Some(n) = self.n_seeds {
            t.insert("n_seeds".into(), Value::Integer(n as i64));
        }
        if let Some(l) = self.lambda {
            t.insert("lambda".into(), Value::Float(l));
        }
        let mut b = Table::new();
        b.insert("c".into(), Value::Float(self.budget_c));
        if let Some(e) = self.bound_epsilon {
            b.insert("epsilon".into(), Value::Float(e));
        }
        t.insert("bounds".into(), Value::Table(b));
        let mut o = Table::new();
        if let Some(p) = &self.outputs.trace {
            o.insert("trace".into(), Value::String(p.display().to_string()));
        }
        if let Some(p) = &self.outputs.summary {
            o.insert("summary".into(), Value::String(p.display().to_string()));
        }
        if !o.is_empty() {
            t.insert("outputs".into(), Value::Table(o));
        }
        toml::to_string(&t).expect("TOML tables always serialize")
    }
}

fn vec_value(v: &Vector) -> Value {
    Value::Array(v.as_slice().iter().map(|x| Value::Float(*x)).collect())
}

fn floats_value(v: &[f64]) -> Value {
    Value::Array(v.iter().map(|x| Value::Float(*x)).collect())
}

fn matrix_value(m: &Matrix) -> Value {
    Value::Array(m.to_rows().iter().map(|r| floats_value(r)).collect())
}

fn problem_table(p: &ProblemConfig) -> Table {
    let mut t = Table::new();
    t.insert("kind".into(), Value::String(p.kind().into()));
    match p {
        ProblemConfig::Dynamic { matrix, offset, offset_sign, modulation, initial } => {
            t.insert("matrix".into(), matrix_value(matrix));
            t.insert("offset".into(), vec_value(offset));
            t.insert("offset_sign".into(), Value::String(offset_sign.as_str().into()));
            t.insert("initial".into(), vec_value(initial));
            let mut m = Table::new();
            m.insert("base".into(), Value::Float(modulation.base));
            m.insert("amplitude".into(), Value::Float(modulation.amplitude));
            m.insert("frequency".into(), Value::Float(modulation.frequency));
            t.insert("modulation".into(), Value::Table(m));
        }
        ProblemConfig::Stochastic { matrix, offset, offset_sign, sampler, initial } => {
            t.insert("matrix".into(), matrix_value(matrix));
            t.insert("offset".into(), vec_value(offset));
            t.insert("offset_sign".into(), Value::String(offset_sign.as_str().into()));
            t.insert("initial".into(), vec_value(initial));
            let mut s = Table::new();
            match sampler {
                SamplerConfig::PointMass => {
                    s.insert("kind".into(), Value::String("point_mass".into()));
                }
                SamplerConfig::UniformScale { lo, hi } => {
                    s.insert("kind".into(), Value::String("uniform_scale".into()));
                    s.insert("lo".into(), Value::Float(*lo));
                    s.insert("hi".into(), Value::Float(*hi));
                }
                SamplerConfig::GaussianOffset { sigma } => {
                    s.insert("kind".into(), Value::String("gaussian_offset".into()));
                    s.insert("sigma".into(), Value::Float(*sigma));
                }
                SamplerConfig::Mixture { weights, scales } => {
                    s.insert("kind".into(), Value::String("mixture".into()));
                    s.insert("weights".into(), floats_value(weights));
                    s.insert("scales".into(), floats_value(scales));
                }
            }
            t.insert("sampler".into(), Value::Table(s));
        }
        ProblemConfig::Coupled(c) => {
            t.insert("own1".into(), matrix_value(&c.own1));
            t.insert("cross1".into(), matrix_value(&c.cross1));
            t.insert("offset1".into(), vec_value(&c.offset1));
            t.insert("own2".into(), matrix_value(&c.own2));
            t.insert("cross2".into(), matrix_value(&c.cross2));
            t.insert("offset2".into(), vec_value(&c.offset2));
            t.insert("initial".into(), vec_value(&c.initial));
            t.insert("initial_partner".into(), vec_value(&c.initial_partner));
        }
    }
    t
}

fn schedule_table(s: &Schedule) -> Table {
    let mut t = Table::new();
    match *s {
        Schedule::Harmonic { offset } => {
            t.insert("kind".into(), Value::String("harmonic".into()));
            t.insert("offset".into(), Value::Integer(offset as i64));
        }
        Schedule::Power { theta, beta } => {
            t.insert("kind".into(), Value::String("power".into()));
            t.insert("theta".into(), Value::Float(theta));
            t.insert("beta".into(), Value::Float(beta));
        }
        Schedule::Constant { gamma } => {
            t.insert("kind".into(), Value::String("constant".into()));
            t.insert("gamma".into(), Value::Float(gamma));
        }
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;

    const DYNAMIC: &str = r#"
        [problem]
        kind = "dynamic"
        matrix = [[1.0]]
        offset = [1.0]
        initial = [0.0]
        modulation = { base = 1.0, amplitude = 0.1, frequency = 1.0 }

        [schedule]
        kind = "harmonic"
        offset = 1

        [stop]
        epsilon = 1e-6
        max_iters = 500

        [time_grid]
        delta = 0.1
        count = 500
    "#;

    fn keys(e: ConfigError) -> Vec<String> {
        e.issues().iter().map(|i| i.key.clone()).collect()
    }

    #[test]
    fn parses_dynamic() {
        let c = parse_config(DYNAMIC).unwrap();
        assert_eq!(c.time_grid.unwrap().delta, 0.1);
        assert_eq!(c.schedule, Schedule::Harmonic { offset: 1 });
        assert_eq!(c.resolvent_mode, ResolventMode::Mean);
        assert!(matches!(c.build().unwrap(), Problem::Dynamic { .. }));
    }

    #[test]
    fn round_trip() {
        let c = parse_config(DYNAMIC).unwrap();
        assert_eq!(parse_config(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn constant_step_above_one_names_key() {
        let text = DYNAMIC.replace("kind = \"harmonic\"\n        offset = 1", "kind = \"constant\"\n        gamma = 1.5");
        let e = parse_config(&text).unwrap_err();
        assert_eq!(keys(e), vec!["schedule.gamma"]);
    }

    #[test]
    fn collects_every_issue() {
        let text = r#"
            bogus = 3
            [problem]
            kind = "dynamic"
            matrix = [[1.0, 2.0]]
            offset = "one"
            [stop]
            epsilon = -1.0
            max_iters = 0
        "#;
        let k = keys(parse_config(text).unwrap_err());
        for want in
            ["bogus", "problem.matrix", "problem.offset", "problem.initial", "schedule", "stop.epsilon", "stop.max_iters"]
        {
            assert!(k.iter().any(|x| x == want), "missing {want} in {k:?}");
        }
    }

    #[test]
    fn semantic_issues_are_collected() {
        let text = DYNAMIC.replace("initial = [0.0]", "initial = [0.0, 1.0]").replace("count = 500", "count = 10");
        let k = keys(parse_config(&text).unwrap_err());
        assert!(k.contains(&"problem.initial".to_string()));
        assert!(k.contains(&"time_grid.count".to_string()));
    }

    #[test]
    fn coupled_inadmissible_step() {
        let text = r#"
            [problem]
            kind = "coupled"
            own1 = [[2.0, 0.0], [0.0, 1.0]]
            cross1 = [[1.0, 0.0], [0.0, 1.0]]
            offset1 = [0.0, 0.0]
            own2 = [[1.0, 0.0], [0.0, 2.0]]
            cross2 = [[1.0, 0.0], [0.0, 1.0]]
            offset2 = [0.0, 0.0]
            initial = [1.0, 1.0]
            initial_partner = [1.0, 1.0]
            [schedule]
            kind = "constant"
            gamma = 0.5
            [stop]
            epsilon = 1e-8
            max_iters = 500
        "#;
        assert_eq!(keys(parse_config(text).unwrap_err()), vec!["schedule.gamma"]);
        let ok = parse_config(&text.replace("gamma = 0.5", "gamma = 0.36")).unwrap();
        assert_eq!(parse_config(&ok.to_toml()).unwrap(), ok);
    }

    #[test]
    fn stochastic_sign_and_seed() {
        let text = r#"
            seed = 4
            [problem]
            kind = "stochastic"
            matrix = [[1.0]]
            offset = [1.0]
            offset_sign = "plus"
            initial = [0]
            sampler = { kind = "mixture", weights = [0.5, 0.5], scales = [0.8, 1.2] }
            [schedule]
            kind = "power"
            theta = 0.5
            beta = 0.75
            [stop]
            epsilon = 1e-8
            max_iters = 10
        "#;
        let c = parse_config(text).unwrap();
        match c.build().unwrap() {
            Problem::Stochastic { op, seed, .. } => {
                assert_eq!(seed, 4);
                assert_eq!(op.mean_operator().as_affine().unwrap().zero().unwrap()[0], -1.0);
            }
            other => panic!("{other:?}"),
        }
        assert_eq!(parse_config(&c.to_toml()).unwrap(), c);
        let k = keys(parse_config(&text.replace("seed = 4", "")).unwrap_err());
        assert_eq!(k, vec!["seed"]);
    }

    #[test]
    fn syntax_errors_are_reported() {
        assert!(matches!(parse_config("[problem"), Err(ConfigError::Syntax(_))));
        assert!(matches!(load_config(Path::new("/nonexistent/x.toml")), Err(ConfigError::Io { .. })));
    }
}
