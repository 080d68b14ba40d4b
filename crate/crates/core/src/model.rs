//! Neutral stochastic delay equations
//!
//! ```text
//! d[X(t) - D(X(t-τ))] = b(X(t), X(t-τ)) dt + σ(X(t), X(t-τ)) dW(t)
//! d[X(t) - D(X(t-τ))] = b(X(t), X(t-τ)) dt + ∫_U h(X(t), X(t-τ), u) Ñ(du, dt)
//! ```
//!
//! An [`EquationSpec`] bundles the coefficient functions, the delay, the
//! horizon, the initial segment and the constants of the structural
//! assumptions. Values are immutable once built and cheap to clone (the
//! coefficients are reference counted), so a spec can be shared by every
//! path worker.

use std::fmt;
use std::sync::Arc;

use thiserror::Error;

use crate::scheme::GridPath;

/// `D(y)`, written into `out`.
pub type NeutralFn = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;
/// `b(x, y)`, written into `out`.
pub type DriftFn = Arc<dyn Fn(&[f64], &[f64], &mut [f64]) + Send + Sync>;
/// `σ(x, y)` as a row-major `n × d` matrix.
pub type DiffusionFn = Arc<dyn Fn(&[f64], &[f64], &mut [f64]) + Send + Sync>;
/// `h(x, y, u)`, written into `out`.
pub type JumpFn = Arc<dyn Fn(&[f64], &[f64], &[f64], &mut [f64]) + Send + Sync>;
/// Closed-form solution `X(t)` given the Brownian value `W(t)`.
pub type ExactFn = Arc<dyn Fn(f64, &[f64], &mut [f64]) + Send + Sync>;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("structural error: {0}")]
    Structural(String),
    #[error("unknown problem `{0}` (expected one of: {list})", list = BUILTIN_PROBLEMS.join(", "))]
    UnknownProblem(String),
    #[error("history index {index} out of range [-{m}, {steps}]")]
    IndexOutOfRange { index: i64, m: usize, steps: usize },
    #[error("invalid mark measure: {0}")]
    InvalidMeasure(String),
    #[error("invalid assumption constant: {0}")]
    InvalidConstant(String),
}

/// Initial segment `ξ` on `[-τ, 0]`.
#[derive(Clone)]
pub enum InitialPath {
    Deterministic(Arc<dyn Fn(f64, &mut [f64]) + Send + Sync>),
    /// Random initial data, a function of the per-path seed only.
    Seeded(Arc<dyn Fn(u64, f64, &mut [f64]) + Send + Sync>),
}

impl InitialPath {
    pub fn constant(value: Vec<f64>) -> Self {
        InitialPath::Deterministic(Arc::new(move |_t, out: &mut [f64]| {
            out.copy_from_slice(&value)
        }))
    }

    pub fn eval(&self, path_seed: u64, t: f64, out: &mut [f64]) {
        match self {
            InitialPath::Deterministic(f) => f(t, out),
            InitialPath::Seeded(f) => f(path_seed, t, out),
        }
    }
}

impl fmt::Debug for InitialPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InitialPath::Deterministic(_) => f.write_str("InitialPath::Deterministic"),
            InitialPath::Seeded(_) => f.write_str("InitialPath::Seeded"),
        }
    }
}

/// Polynomial envelope `L (1 + |x|^l + |y|^l)` bounding one of the local
/// Lipschitz weights `V_i`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Envelope {
    pub scale: f64,
    pub exponent: f64,
}

impl Envelope {
    pub fn new(scale: f64, exponent: f64) -> Self {
        Envelope { scale, exponent }
    }

    /// Envelope evaluated at `(y, 0)`.
    pub fn at_origin(&self, y_norm: f64) -> f64 {
        self.scale * (1.0 + y_norm.powf(self.exponent))
    }
}

/// Constants of the structural assumptions.
#[derive(Debug, Clone, PartialEq)]
pub struct AssumptionConstants {
    /// One-sided Lipschitz constant of the drift.
    pub k1: f64,
    /// Lipschitz constant of `σ` in `x`.
    pub k2: f64,
    /// Lipschitz constant of `h` in `x` (jump driver).
    pub k2_bar: f64,
    /// Mark exponent in the jump growth bound `|u|^r`.
    pub r: f64,
    /// Envelopes of `V_1`, `V_2`, `V_3`.
    pub envelopes: [Envelope; 3],
    /// `K = max{2(K1²+1), 4K2², |b(0,0)|², 2‖σ(0,0)‖²}`.
    pub k_monotone: f64,
    /// `l_1 ∨ l_2 ∨ l_3`.
    pub l_max: f64,
    /// `K̄` with `|b(x,0)| ≤ K̄(1+|x|)`; asserted by the user, required for θ < 1/2.
    pub linear_growth: Option<f64>,
}

impl AssumptionConstants {
    /// Builds the constants with `K` taken as `max{2(K1²+1), 4K2²}`.
    /// [`EquationSpec::calibrate_constants`] folds in the terms that depend on
    /// the coefficients at the origin.
    pub fn new(
        k1: f64,
        k2: f64,
        k2_bar: f64,
        r: f64,
        envelopes: [Envelope; 3],
    ) -> Result<Self, ModelError> {
        for (name, v) in [("k1", k1), ("k2", k2), ("k2_bar", k2_bar)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(ModelError::InvalidConstant(format!("{name} = {v} must be positive")));
            }
        }
        if !(r >= 1.0) {
            return Err(ModelError::InvalidConstant(format!("r = {r} must be >= 1")));
        }
        for (i, e) in envelopes.iter().enumerate() {
            if !(e.scale > 0.0) || !(e.exponent >= 1.0) {
                return Err(ModelError::InvalidConstant(format!(
                    "envelope {} needs L > 0 and l >= 1 (got L = {}, l = {})",
                    i + 1,
                    e.scale,
                    e.exponent
                )));
            }
        }
        let l_max = envelopes.iter().map(|e| e.exponent).fold(f64::MIN, f64::max);
        Ok(AssumptionConstants {
            k1,
            k2,
            k2_bar,
            r,
            envelopes,
            k_monotone: (2.0 * (k1 * k1 + 1.0)).max(4.0 * k2 * k2),
            l_max,
            linear_growth: None,
        })
    }

    pub fn with_linear_growth(mut self, k_bar: f64) -> Self {
        self.linear_growth = Some(k_bar);
        self
    }

    /// `|V(y,0)|² = 2 max{V1(y,0)² + V3(y,0)², 2 V2(y,0)²}` using the envelopes.
    pub fn v_squared(&self, y_norm: f64) -> f64 {
        let [e1, e2, e3] = self.envelopes;
        let v1 = e1.at_origin(y_norm);
        let v2 = e2.at_origin(y_norm);
        let v3 = e3.at_origin(y_norm);
        2.0 * (v1 * v1 + v3 * v3).max(2.0 * v2 * v2)
    }
}

/// Finite discrete mark measure `λ` on `U`.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkMeasure {
    dim_mark: usize,
    marks: Vec<f64>,
    weights: Vec<f64>,
    total_mass: f64,
}

impl MarkMeasure {
    pub fn new(atoms: Vec<(Vec<f64>, f64)>) -> Result<Self, ModelError> {
        let dim_mark = atoms
            .first()
            .map(|(u, _)| u.len())
            .ok_or_else(|| ModelError::InvalidMeasure("no atoms".into()))?;
        if dim_mark == 0 {
            return Err(ModelError::InvalidMeasure("marks must have dimension >= 1".into()));
        }
        let mut marks = Vec::with_capacity(atoms.len() * dim_mark);
        let mut weights = Vec::with_capacity(atoms.len());
        for (u, w) in atoms {
            if u.len() != dim_mark {
                return Err(ModelError::InvalidMeasure("marks of mixed dimension".into()));
            }
            if !(w > 0.0 && w.is_finite()) {
                return Err(ModelError::InvalidMeasure(format!("weight {w} must be positive")));
            }
            if u.iter().any(|c| !c.is_finite()) {
                return Err(ModelError::InvalidMeasure("non-finite mark".into()));
            }
            marks.extend_from_slice(&u);
            weights.push(w);
        }
        let total_mass = weights.iter().sum();
        Ok(MarkMeasure { dim_mark, marks, weights, total_mass })
    }

    pub fn single(mark: f64, weight: f64) -> Result<Self, ModelError> {
        Self::new(vec![(vec![mark], weight)])
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn dim_mark(&self) -> usize {
        self.dim_mark
    }

    pub fn mark(&self, i: usize) -> &[f64] {
        &self.marks[i * self.dim_mark..(i + 1) * self.dim_mark]
    }

    pub fn weight(&self, i: usize) -> f64 {
        self.weights[i]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// `λ(U)`.
    pub fn total_mass(&self) -> f64 {
        self.total_mass
    }

    pub fn atoms(&self) -> impl Iterator<Item = (&[f64], f64)> + '_ {
        (0..self.len()).map(move |i| (self.mark(i), self.weights[i]))
    }
}

/// Jump coefficient together with its mark measure.
#[derive(Clone)]
pub struct JumpPart {
    pub coeff: JumpFn,
    pub measure: MarkMeasure,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DriverKind {
    Brownian,
    Jump,
}

impl fmt::Display for DriverKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DriverKind::Brownian => "brownian",
            DriverKind::Jump => "jump",
        })
    }
}

#[derive(Clone)]
pub struct EquationSpec {
    pub name: String,
    pub dim_state: usize,
    /// Brownian dimension `d` (ignored for the jump driver).
    pub dim_noise: usize,
    pub delay: f64,
    pub horizon: f64,
    pub neutral: NeutralFn,
    pub drift: DriftFn,
    pub diffusion: Option<DiffusionFn>,
    pub jump: Option<JumpPart>,
    pub initial: InitialPath,
    pub constants: AssumptionConstants,
    /// Closed-form solution, when one is known (Brownian driver only).
    pub exact: Option<ExactFn>,
}

impl fmt::Debug for EquationSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("EquationSpec")
            .field("name", &self.name)
            .field("dim_state", &self.dim_state)
            .field("dim_noise", &self.dim_noise)
            .field("delay", &self.delay)
            .field("horizon", &self.horizon)
            .field("diffusion", &self.diffusion.is_some())
            .field("jump", &self.jump.as_ref().map(|j| &j.measure))
            .field("constants", &self.constants)
            .finish()
    }
}

impl EquationSpec {
    /// Driver kind, or a structural error if both or neither of `σ`/`h` is set.
    pub fn driver(&self) -> Result<DriverKind, ModelError> {
        match (&self.diffusion, &self.jump) {
            (Some(_), None) => Ok(DriverKind::Brownian),
            (None, Some(_)) => Ok(DriverKind::Jump),
            (Some(_), Some(_)) => Err(ModelError::Structural(
                "both a diffusion and a jump coefficient are present".into(),
            )),
            (None, None) => Err(ModelError::Structural(
                "neither a diffusion nor a jump coefficient is present".into(),
            )),
        }
    }

    /// Checks the structural invariants that do not need sampling.
    pub fn check_structure(&self) -> Result<DriverKind, ModelError> {
        let kind = self.driver()?;
        if self.dim_state == 0 {
            return Err(ModelError::Structural("dim_state must be positive".into()));
        }
        if kind == DriverKind::Brownian && self.dim_noise == 0 {
            return Err(ModelError::Structural("dim_noise must be positive".into()));
        }
        if !(self.delay > 0.0 && self.delay.is_finite()) {
            return Err(ModelError::Structural(format!("delay {} must be positive", self.delay)));
        }
        if !(self.horizon > self.delay && self.horizon.is_finite()) {
            return Err(ModelError::Structural(format!(
                "horizon {} must exceed the delay {}",
                self.horizon, self.delay
            )));
        }
        Ok(kind)
    }

    pub fn eval_neutral(&self, y: &[f64], out: &mut [f64]) {
        (self.neutral)(y, out)
    }

    pub fn eval_drift(&self, x: &[f64], y: &[f64], out: &mut [f64]) {
        (self.drift)(x, y, out)
    }

    /// Raises `K` to cover `|b(0,0)|²` and `2‖σ(0,0)‖²`.
    pub fn calibrate_constants(&mut self) {
        let n = self.dim_state;
        let zero = vec![0.0; n];
        let mut b = vec![0.0; n];
        self.eval_drift(&zero, &zero, &mut b);
        let mut k = self.constants.k_monotone.max(norm_sq(&b));
        if let Some(sigma) = &self.diffusion {
            let mut s = vec![0.0; n * self.dim_noise.max(1)];
            sigma(&zero, &zero, &mut s);
            k = k.max(2.0 * norm_sq(&s));
        }
        self.constants.k_monotone = k;
    }
}

pub(crate) fn norm_sq(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum()
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    norm_sq(v).sqrt()
}

/// Returns `y_{t_{k-m}}` from a simulated path.
pub fn history_value(
    _spec: &EquationSpec,
    path: &GridPath,
    k: i64,
    m: usize,
) -> Result<Vec<f64>, ModelError> {
    let index = k - m as i64;
    if k < 0 || index > path.steps() as i64 {
        return Err(ModelError::IndexOutOfRange { index, m, steps: path.steps() });
    }
    Ok(path.y(index).to_vec())
}

// ---------------------------------------------------------------------------
// Validation

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckStatus {
    Pass,
    Fail,
    Skipped,
}

impl fmt::Display for CheckStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CheckStatus::Pass => "PASS",
            CheckStatus::Fail => "FAIL",
            CheckStatus::Skipped => "SKIPPED",
        })
    }
}

/// A sampled point at which a stated bound did not hold.
#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub lhs: f64,
    pub rhs: f64,
}

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: &'static str,
    pub status: CheckStatus,
    pub points: usize,
    pub violations: Vec<Violation>,
    pub detail: String,
}

#[derive(Debug, Clone)]
pub struct ValidationReport {
    pub problem: String,
    pub checks: Vec<CheckResult>,
}

impl ValidationReport {
    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|c| c.status != CheckStatus::Fail)
    }

    pub fn check(&self, name: &str) -> Option<&CheckResult> {
        self.checks.iter().find(|c| c.name == name)
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "assumption report for {}", self.problem)?;
        for c in &self.checks {
            write!(f, "{:<24} {:<7} points={}", c.name, c.status.to_string(), c.points)?;
            if !c.violations.is_empty() {
                write!(f, " violations={}", c.violations.len())?;
            }
            if !c.detail.is_empty() {
                write!(f, " ({})", c.detail)?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

const MAX_RECORDED_VIOLATIONS: usize = 16;
const LATTICE_SIDE: usize = 21;
const LATTICE_HALF_WIDTH: f64 = 2.0;
const CHECK_TOL: f64 = 1e-12;

/// Deterministic sample of `(x, y)` pairs on `[-2, 2]^{2n}`: the full
/// 21-point-per-coordinate lattice for `n <= 2`, otherwise 1000 Halton points.
pub fn sample_points(n: usize) -> Vec<(Vec<f64>, Vec<f64>)> {
    let dims = 2 * n;
    let lattice = |i: usize| {
        -LATTICE_HALF_WIDTH + 2.0 * LATTICE_HALF_WIDTH * i as f64 / (LATTICE_SIDE - 1) as f64
    };
    let mut out = Vec::new();
    if n <= 2 {
        let total = LATTICE_SIDE.pow(dims as u32);
        for mut idx in 0..total {
            let mut coords = Vec::with_capacity(dims);
            for _ in 0..dims {
                coords.push(lattice(idx % LATTICE_SIDE));
                idx /= LATTICE_SIDE;
            }
            let y = coords.split_off(n);
            out.push((coords, y));
        }
    } else {
        let primes = first_primes(dims);
        for i in 1..=1000usize {
            let mut coords: Vec<f64> = primes
                .iter()
                .map(|&p| -LATTICE_HALF_WIDTH + 2.0 * LATTICE_HALF_WIDTH * halton(i, p))
                .collect();
            let y = coords.split_off(n);
            out.push((coords, y));
        }
    }
    out
}

fn halton(mut i: usize, base: usize) -> f64 {
    let mut f = 1.0;
    let mut r = 0.0;
    while i > 0 {
        f /= base as f64;
        r += f * (i % base) as f64;
        i /= base;
    }
    r
}

fn first_primes(count: usize) -> Vec<usize> {
    let mut primes = Vec::with_capacity(count);
    let mut c = 2;
    while primes.len() < count {
        if primes.iter().all(|p| c % p != 0) {
            primes.push(c);
        }
        c += 1;
    }
    primes
}

struct Checker {
    name: &'static str,
    points: usize,
    violations: Vec<Violation>,
    count: usize,
}

impl Checker {
    fn new(name: &'static str) -> Self {
        Checker { name, points: 0, violations: Vec::new(), count: 0 }
    }

    fn record(&mut self, x: &[f64], y: &[f64], lhs: f64, rhs: f64) {
        self.points += 1;
        let ok = lhs.is_finite() && lhs <= rhs * (1.0 + CHECK_TOL) + CHECK_TOL;
        if !ok {
            self.count += 1;
            if self.violations.len() < MAX_RECORDED_VIOLATIONS {
                self.violations.push(Violation { x: x.to_vec(), y: y.to_vec(), lhs, rhs });
            }
        }
    }

    fn finish(self, detail: String) -> CheckResult {
        let status = if self.count == 0 { CheckStatus::Pass } else { CheckStatus::Fail };
        let detail = if self.count > MAX_RECORDED_VIOLATIONS {
            format!("{detail}; {} violations, first {} recorded", self.count, MAX_RECORDED_VIOLATIONS)
        } else {
            detail
        };
        CheckResult { name: self.name, status, points: self.points, violations: self.violations, detail }
    }
}

fn skipped(name: &'static str, detail: &str) -> CheckResult {
    CheckResult {
        name,
        status: CheckStatus::Skipped,
        points: 0,
        violations: Vec::new(),
        detail: detail.to_string(),
    }
}

/// Sample-based check of the structural assumptions.
///
/// Structural defects (both or neither noise coefficient, bad dimensions)
/// are errors; sampled bound violations are reported as `FAIL` entries.
pub fn validate_spec(spec: &EquationSpec) -> Result<ValidationReport, ModelError> {
    let kind = spec.check_structure()?;
    let n = spec.dim_state;
    let d = spec.dim_noise.max(1);
    let c = &spec.constants;
    let points = sample_points(n);
    let zero = vec![0.0; n];
    let mut dy = vec![0.0; n];
    let mut bx = vec![0.0; n];
    let mut sig = vec![0.0; n * d];
    let mut checks = Vec::new();

    // D(0) = 0
    let mut d0 = Checker::new("neutral-origin");
    spec.eval_neutral(&zero, &mut dy);
    d0.record(&zero, &zero, norm(&dy), 0.0);
    checks.push(d0.finish("|D(0)| = 0".into()));

    // consistency of K and l with their definitions
    let mut consts = Checker::new("constants-consistency");
    consts.record(&zero, &zero, 2.0 * (c.k1 * c.k1 + 1.0), c.k_monotone);
    let l_max = c.envelopes.iter().map(|e| e.exponent).fold(f64::MIN, f64::max);
    consts.record(&zero, &zero, (c.l_max - l_max).abs(), 0.0);
    spec.eval_drift(&zero, &zero, &mut bx);
    consts.record(&zero, &zero, norm_sq(&bx), c.k_monotone);
    if let Some(sigma) = &spec.diffusion {
        sigma(&zero, &zero, &mut sig);
        consts.record(&zero, &zero, 2.0 * norm_sq(&sig), c.k_monotone);
    }
    checks.push(consts.finish(format!("K = {}, l = {}", c.k_monotone, c.l_max)));

    // 2<x - D(y), b(x,y)> ∨ ‖σ(x,y)‖² <= K(1+|x|²) + |V(y,0)|²|y|²
    let mut mono = Checker::new("monotone-bound");
    // |D(y)| <= L3 (1 + |y| + |y|^{l3+1})
    let mut growth = Checker::new("neutral-growth");
    let e3 = c.envelopes[2];
    for (x, y) in &points {
        spec.eval_neutral(y, &mut dy);
        spec.eval_drift(x, y, &mut bx);
        let inner: f64 = x.iter().zip(&dy).zip(&bx).map(|((xi, di), bi)| (xi - di) * bi).sum();
        let mut lhs = 2.0 * inner;
        if let Some(sigma) = &spec.diffusion {
            sigma(x, y, &mut sig);
            lhs = lhs.max(norm_sq(&sig));
        }
        let yn = norm(y);
        let rhs = c.k_monotone * (1.0 + norm_sq(x)) + c.v_squared(yn) * yn * yn;
        mono.record(x, y, lhs, rhs);
        growth.record(x, y, norm(&dy), e3.scale * (1.0 + yn + yn.powf(e3.exponent + 1.0)));
    }
    checks.push(mono.finish(String::new()));
    checks.push(growth.finish(String::new()));

    match (kind, &spec.jump) {
        (DriverKind::Jump, Some(jump)) => {
            let mut hv = vec![0.0; n];
            // |h(0,0,u)| <= |u|^r
            let mut origin = Checker::new("jump-origin");
            for (u, _) in jump.measure.atoms() {
                (jump.coeff)(&zero, &zero, u, &mut hv);
                origin.record(&zero, &zero, norm(&hv), norm(u).powf(c.r));
            }
            checks.push(origin.finish(String::new()));
            // |h(x,y,u)| <= [1 + K̄2|x| + V2(y,0)|y|] |u|^r
            let mut hg = Checker::new("jump-growth");
            let e2 = c.envelopes[1];
            for (x, y) in &points {
                let yn = norm(y);
                let envelope = 1.0 + c.k2_bar * norm(x) + e2.at_origin(yn) * yn;
                for (u, _) in jump.measure.atoms() {
                    (jump.coeff)(x, y, u, &mut hv);
                    hg.record(x, y, norm(&hv), envelope * norm(u).powf(c.r));
                }
            }
            checks.push(hg.finish(String::new()));
        }
        _ => {
            checks.push(skipped("jump-origin", "brownian driver"));
            checks.push(skipped("jump-growth", "brownian driver"));
        }
    }

    checks.push(match c.linear_growth {
        Some(k_bar) => linear_growth_check(spec, &points, k_bar),
        None => skipped("drift-linear-growth", "no linear-growth constant asserted"),
    });

    Ok(ValidationReport { problem: spec.name.clone(), checks })
}

/// `|b(x,0)| <= K̄(1+|x|)` on the sample lattice.
pub(crate) fn linear_growth_check(
    spec: &EquationSpec,
    points: &[(Vec<f64>, Vec<f64>)],
    k_bar: f64,
) -> CheckResult {
    let n = spec.dim_state;
    let zero = vec![0.0; n];
    let mut bx = vec![0.0; n];
    let mut chk = Checker::new("drift-linear-growth");
    for (x, _) in points {
        spec.eval_drift(x, &zero, &mut bx);
        chk.record(x, &zero, norm(&bx), k_bar * (1.0 + norm(x)));
    }
    chk.finish(format!("K̄ = {k_bar}"))
}

// ---------------------------------------------------------------------------
// Builtin problems

pub const BUILTIN_PROBLEMS: [&str; 4] =
    ["cubic-neutral", "gbm-nodelay", "linear-ode", "cubic-neutral-jump"];

/// Parameters of the builtin problems. Unused fields are ignored.
#[derive(Debug, Clone, PartialEq)]
pub struct BuiltinParams {
    /// Constant initial value for the cubic problems.
    pub xi: f64,
    /// GBM drift rate.
    pub mu: f64,
    /// GBM volatility.
    pub sigma: f64,
    /// Linear ODE rate.
    pub a: f64,
    /// Initial value for the GBM and linear ODE problems.
    pub x0: f64,
    /// Atoms `(mark, weight)` of the jump problem.
    pub marks: Vec<(f64, f64)>,
}

impl Default for BuiltinParams {
    fn default() -> Self {
        BuiltinParams {
            xi: 0.2,
            mu: 0.05,
            sigma: 0.2,
            a: 1.0,
            x0: 1.0,
            marks: vec![(0.2, 1.0), (0.5, 0.5)],
        }
    }
}

pub fn builtin_problem(name: &str) -> Result<EquationSpec, ModelError> {
    builtin_problem_with(name, &BuiltinParams::default())
}

pub fn builtin_problem_with(name: &str, params: &BuiltinParams) -> Result<EquationSpec, ModelError> {
    let mut spec = match name {
        "cubic-neutral" => cubic_neutral(params.xi)?,
        "gbm-nodelay" => gbm_nodelay(params.mu, params.sigma, params.x0)?,
        "linear-ode" => linear_ode(params.a, params.x0)?,
        "cubic-neutral-jump" => {
            let atoms = params.marks.iter().map(|&(u, w)| (vec![u], w)).collect();
            cubic_neutral_jump(params.xi, MarkMeasure::new(atoms)?)?
        }
        other => return Err(ModelError::UnknownProblem(other.to_string())),
    };
    spec.calibrate_constants();
    Ok(spec)
}

fn cubic_neutral_parts() -> (NeutralFn, DriftFn) {
    let neutral: NeutralFn = Arc::new(|y: &[f64], out: &mut [f64]| out[0] = -y[0].powi(3));
    let drift: DriftFn = Arc::new(|x: &[f64], y: &[f64], out: &mut [f64]| {
        out[0] = x[0] - x[0].powi(3) + y[0].powi(3)
    });
    (neutral, drift)
}

/// `D(y) = -y³`, `b(x,y) = x - x³ + y³`, `σ(x,y) = x + y⁴` on `τ = 1/2`, `T = 1`.
fn cubic_neutral(xi: f64) -> Result<EquationSpec, ModelError> {
    let (neutral, drift) = cubic_neutral_parts();
    let constants = AssumptionConstants::new(
        1.0,
        1.0,
        1.0,
        1.0,
        [Envelope::new(1.0, 2.0), Envelope::new(1.0, 3.0), Envelope::new(1.0, 2.0)],
    )?;
    Ok(EquationSpec {
        name: "cubic-neutral".into(),
        dim_state: 1,
        dim_noise: 1,
        delay: 0.5,
        horizon: 1.0,
        neutral,
        drift,
        diffusion: Some(Arc::new(|x: &[f64], y: &[f64], out: &mut [f64]| {
            out[0] = x[0] + y[0].powi(4)
        })),
        jump: None,
        initial: InitialPath::constant(vec![xi]),
        constants,
        exact: None,
    })
}

/// Cubic neutral drift with `h(x,y,u) = (x + y²) u`.
fn cubic_neutral_jump(xi: f64, measure: MarkMeasure) -> Result<EquationSpec, ModelError> {
    let (neutral, drift) = cubic_neutral_parts();
    let constants = AssumptionConstants::new(
        1.0,
        1.0,
        1.0,
        1.0,
        [Envelope::new(1.0, 2.0), Envelope::new(1.0, 3.0), Envelope::new(1.0, 2.0)],
    )?;
    Ok(EquationSpec {
        name: "cubic-neutral-jump".into(),
        dim_state: 1,
        dim_noise: 1,
        delay: 0.5,
        horizon: 1.0,
        neutral,
        drift,
        diffusion: None,
        jump: Some(JumpPart {
            coeff: Arc::new(|x: &[f64], y: &[f64], u: &[f64], out: &mut [f64]| {
                out[0] = (x[0] + y[0] * y[0]) * u[0]
            }),
            measure,
        }),
        initial: InitialPath::constant(vec![xi]),
        constants,
        exact: None,
    })
}

fn zero_neutral() -> NeutralFn {
    Arc::new(|_y: &[f64], out: &mut [f64]| out.iter_mut().for_each(|o| *o = 0.0))
}

/// `dX = μX dt + σ̄X dW` with `D ≡ 0`; the delay is not used by the coefficients.
fn gbm_nodelay(mu: f64, sigma: f64, x0: f64) -> Result<EquationSpec, ModelError> {
    let constants = AssumptionConstants::new(
        1.0_f64.max(mu.abs().sqrt()),
        sigma.abs().max(1e-3),
        1.0,
        1.0,
        [Envelope::new(1.0, 1.0); 3],
    )?
    .with_linear_growth(mu.abs().max(1e-3));
    let shift = mu - 0.5 * sigma * sigma;
    Ok(EquationSpec {
        name: "gbm-nodelay".into(),
        dim_state: 1,
        dim_noise: 1,
        delay: 0.5,
        horizon: 1.0,
        neutral: zero_neutral(),
        drift: Arc::new(move |x: &[f64], _y: &[f64], out: &mut [f64]| out[0] = mu * x[0]),
        diffusion: Some(Arc::new(move |x: &[f64], _y: &[f64], out: &mut [f64]| {
            out[0] = sigma * x[0]
        })),
        jump: None,
        initial: InitialPath::constant(vec![x0]),
        constants,
        exact: Some(Arc::new(move |t: f64, w: &[f64], out: &mut [f64]| {
            out[0] = x0 * (shift * t + sigma * w[0]).exp()
        })),
    })
}

/// `dX = aX dt`, `σ ≡ 0`, `D ≡ 0`.
fn linear_ode(a: f64, x0: f64) -> Result<EquationSpec, ModelError> {
    let constants = AssumptionConstants::new(
        1.0_f64.max(a.abs().sqrt()),
        1.0,
        1.0,
        1.0,
        [Envelope::new(1.0, 1.0); 3],
    )?
    .with_linear_growth(a.abs().max(1e-3));
    Ok(EquationSpec {
        name: "linear-ode".into(),
        dim_state: 1,
        dim_noise: 1,
        delay: 0.5,
        horizon: 1.0,
        neutral: zero_neutral(),
        drift: Arc::new(move |x: &[f64], _y: &[f64], out: &mut [f64]| out[0] = a * x[0]),
        diffusion: Some(Arc::new(|_x: &[f64], _y: &[f64], out: &mut [f64]| out[0] = 0.0)),
        jump: None,
        initial: InitialPath::constant(vec![x0]),
        constants,
        exact: Some(Arc::new(move |t: f64, _w: &[f64], out: &mut [f64]| {
            out[0] = x0 * (a * t).exp()
        })),
    })
}
