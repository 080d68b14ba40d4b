//! θ-EM and split-step θ-EM integration on a uniform grid.
//!
//! With `Δ = τ/m = T/M` and `y_k = ξ(kΔ)` for `k <= 0`, the direct scheme is
//!
//! ```text
//! y_{k+1} - D(y_{k+1-m}) = y_k - D(y_{k-m}) + θΔ b(y_{k+1}, y_{k+1-m})
//!                          + (1-θ)Δ b(y_k, y_{k-m}) + G_k
//! ```
//!
//! where `G_k` is `σ(y_k, y_{k-m}) ΔW_k` or the compensated jump integral over
//! step `k`. The split-step form carries auxiliary iterates `z_k`:
//!
//! ```text
//! y_k     = D(y_{k-m}) + z_k - D(z_{k-m}) + θΔ b(y_k, y_{k-m})
//! z_{k+1} = D(z_{k+1-m}) + z_k - D(z_{k-m}) + Δ b(y_k, y_{k-m}) + G_k
//! ```
//!
//! Both implicit relations have the shape `v = c + θΔ b(v, y_d)` and are
//! solved by damped fixed-point iteration.

use std::io::{self, Write};

use thiserror::Error;

use crate::drivers::NoiseRealization;
use crate::model::{self, DriverKind, EquationSpec, ModelError};

const GRID_TOL: f64 = 1e-9;
const MIN_DAMPING: f64 = 1.0 / (1u64 << 30) as f64;

#[derive(Debug, Error)]
pub enum SchemeError {
    #[error("theta = {0} must lie in [0, 1]")]
    InvalidTheta(f64),
    #[error("delta = {0} must be positive")]
    InvalidDelta(f64),
    #[error(
        "delta = {delta} violates the step-size bound delta < (2K ∨ 4K1²)^-1 θ^-1 = {bound} \
         (K = {k_monotone}, K1 = {k1}, θ = {theta})"
    )]
    StepTooLarge { delta: f64, bound: f64, k_monotone: f64, k1: f64, theta: f64 },
    #[error("{what} / delta = {ratio} is not an integer")]
    NonIntegerGrid { what: &'static str, ratio: f64 },
    #[error("theta = {0} < 1/2 requires allow_low_theta and a linear-growth constant for b(x, 0)")]
    LowThetaNotAllowed(f64),
    #[error("theta < 1/2: linear growth |b(x,0)| <= {k_bar}(1+|x|) fails on the sample lattice")]
    LinearGrowthViolated { k_bar: f64 },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("noise does not match the scheme: {0}")]
    NoiseMismatch(String),
    #[error("implicit solve did not converge{} after {iters} iterations (residual {residual:e})", at_step(*.step))]
    SolverDiverged { step: Option<usize>, iters: u32, residual: f64 },
    #[error("non-finite iterate in implicit solve{}", at_step(*.step))]
    NonFiniteIterate { step: Option<usize> },
    #[error("continuous interpolants are only available at grid points (t = {0})")]
    OffGridContinuousQuery(f64),
    #[error("time {t} outside [-{delay}, {horizon}]")]
    TimeOutOfRange { t: f64, delay: f64, horizon: f64 },
}

fn at_step(step: Option<usize>) -> String {
    step.map(|k| format!(" at step {k}")).unwrap_or_default()
}

impl SchemeError {
    fn at(self, k: usize) -> Self {
        match self {
            SchemeError::SolverDiverged { iters, residual, .. } => {
                SchemeError::SolverDiverged { step: Some(k), iters, residual }
            }
            SchemeError::NonFiniteIterate { .. } => SchemeError::NonFiniteIterate { step: Some(k) },
            other => other,
        }
    }
}

/// `(max(2K, 4K1²))⁻¹ θ⁻¹`, or `+∞` for the explicit scheme.
pub fn max_stable_step(constants: &model::AssumptionConstants, theta: f64) -> f64 {
    if theta <= 0.0 {
        return f64::INFINITY;
    }
    let denom = (2.0 * constants.k_monotone).max(4.0 * constants.k1 * constants.k1);
    1.0 / (denom * theta)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SchemeConfig {
    pub theta: f64,
    pub delta: f64,
    /// Relative residual tolerance of the implicit solve.
    pub solver_tol: f64,
    pub solver_max_iter: u32,
    /// Permit θ < 1/2 (needs a linear-growth constant for `b(·, 0)`).
    pub allow_low_theta: bool,
}

impl SchemeConfig {
    pub fn new(theta: f64, delta: f64) -> Self {
        SchemeConfig {
            theta,
            delta,
            solver_tol: 1e-12,
            solver_max_iter: 200,
            allow_low_theta: false,
        }
    }

    pub fn with_delta(&self, delta: f64) -> Self {
        SchemeConfig { delta, ..self.clone() }
    }

    /// Checks every invariant that does not need sampling the coefficients
    /// and returns `(m, M)`.
    pub fn grid(&self, spec: &EquationSpec) -> Result<Grid, SchemeError> {
        spec.check_structure()?;
        if !(0.0..=1.0).contains(&self.theta) {
            return Err(SchemeError::InvalidTheta(self.theta));
        }
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return Err(SchemeError::InvalidDelta(self.delta));
        }
        let bound = max_stable_step(&spec.constants, self.theta);
        if self.delta >= bound {
            return Err(SchemeError::StepTooLarge {
                delta: self.delta,
                bound,
                k_monotone: spec.constants.k_monotone,
                k1: spec.constants.k1,
                theta: self.theta,
            });
        }
        let m = integer_ratio(spec.delay, self.delta, "delay")?;
        let steps = integer_ratio(spec.horizon, self.delta, "horizon")?;
        if self.theta < 0.5 && !(self.allow_low_theta && spec.constants.linear_growth.is_some()) {
            return Err(SchemeError::LowThetaNotAllowed(self.theta));
        }
        Ok(Grid { m, steps })
    }

    /// [`grid`](Self::grid) plus the linear-growth spot check required for
    /// θ < 1/2.
    pub fn validate(&self, spec: &EquationSpec) -> Result<Grid, SchemeError> {
        let grid = self.grid(spec)?;
        if self.theta < 0.5 {
            let k_bar = spec.constants.linear_growth.ok_or(SchemeError::LowThetaNotAllowed(self.theta))?;
            let points = model::sample_points(spec.dim_state);
            let check = model::linear_growth_check(spec, &points, k_bar);
            if check.status == model::CheckStatus::Fail {
                return Err(SchemeError::LinearGrowthViolated { k_bar });
            }
        }
        Ok(grid)
    }
}

fn integer_ratio(len: f64, delta: f64, what: &'static str) -> Result<usize, SchemeError> {
    let ratio = len / delta;
    let r = ratio.round();
    if r < 1.0 || (ratio - r).abs() > GRID_TOL * r.max(1.0) {
        return Err(SchemeError::NonIntegerGrid { what, ratio });
    }
    Ok(r as usize)
}

/// `m = τ/Δ` and `M = T/Δ`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Grid {
    pub m: usize,
    pub steps: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StepStats {
    pub iters: u32,
    pub residual: f64,
}

/// Discrete solution on `k = -m..=M`.
#[derive(Debug, Clone, PartialEq)]
pub struct GridPath {
    dim: usize,
    delta: f64,
    m: usize,
    steps: usize,
    y: Vec<f64>,
    z: Option<Vec<f64>>,
    /// Implicit-solve statistics for `y_k`, `k = 0..=M`.
    pub stats: Vec<StepStats>,
}

impl GridPath {
    fn new(dim: usize, delta: f64, grid: Grid, with_z: bool) -> Self {
        let len = (grid.m + grid.steps + 1) * dim;
        GridPath {
            dim,
            delta,
            m: grid.m,
            steps: grid.steps,
            y: vec![0.0; len],
            z: with_z.then(|| vec![0.0; len]),
            stats: vec![StepStats::default(); grid.steps + 1],
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    fn offset(&self, k: i64) -> usize {
        debug_assert!(k >= -(self.m as i64) && k <= self.steps as i64);
        (k + self.m as i64) as usize * self.dim
    }

    /// `y_k` for `-m <= k <= M`.
    pub fn y(&self, k: i64) -> &[f64] {
        let o = self.offset(k);
        &self.y[o..o + self.dim]
    }

    pub fn z(&self, k: i64) -> Option<&[f64]> {
        let o = self.offset(k);
        self.z.as_ref().map(|z| &z[o..o + self.dim])
    }

    pub fn has_z(&self) -> bool {
        self.z.is_some()
    }

    pub fn y_mut(&mut self, k: i64) -> &mut [f64] {
        let o = self.offset(k);
        &mut self.y[o..o + self.dim]
    }

    /// The whole `y` array, `k = -m..=M`, row major.
    pub fn y_values(&self) -> &[f64] {
        &self.y
    }

    /// Writes `k,t,y_1..y_n,residual,iters`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        write!(out, "k,t")?;
        for i in 1..=self.dim {
            write!(out, ",y_{i}")?;
        }
        writeln!(out, ",residual,iters")?;
        for k in -(self.m as i64)..=self.steps as i64 {
            write!(out, "{k},{:.16e}", k as f64 * self.delta)?;
            for v in self.y(k) {
                write!(out, ",{v:.16e}")?;
            }
            let st = if k >= 0 { self.stats[k as usize] } else { StepStats::default() };
            writeln!(out, ",{:.16e},{}", st.residual, st.iters)?;
        }
        Ok(())
    }
}

/// Scratch space and fixed parameters for stepping one path.
pub struct Simulator<'a> {
    spec: &'a EquationSpec,
    config: &'a SchemeConfig,
    kind: DriverKind,
    grid: Grid,
    n: usize,
    d: usize,
    rhs: Vec<f64>,
    v: Vec<f64>,
    g: Vec<f64>,
    trial: Vec<f64>,
    g_trial: Vec<f64>,
    prev_update: Vec<f64>,
    b: Vec<f64>,
    d1: Vec<f64>,
    d2: Vec<f64>,
    noise_term: Vec<f64>,
    sigma: Vec<f64>,
    scratch: Vec<f64>,
    x_buf: Vec<f64>,
    y_buf: Vec<f64>,
}

impl<'a> Simulator<'a> {
    /// Validates `config` against `spec` (including the θ < 1/2 spot check).
    pub fn new(spec: &'a EquationSpec, config: &'a SchemeConfig) -> Result<Self, SchemeError> {
        let grid = config.validate(spec)?;
        Ok(Self::with_grid(spec, config, grid))
    }

    /// Skips validation; `grid` must come from [`SchemeConfig::validate`].
    pub fn with_grid(spec: &'a EquationSpec, config: &'a SchemeConfig, grid: Grid) -> Self {
        let n = spec.dim_state;
        let d = spec.dim_noise.max(1);
        let kind = spec.driver().expect("validated spec");
        Simulator {
            spec,
            config,
            kind,
            grid,
            n,
            d,
            rhs: vec![0.0; n],
            v: vec![0.0; n],
            g: vec![0.0; n],
            trial: vec![0.0; n],
            g_trial: vec![0.0; n],
            prev_update: vec![0.0; n],
            b: vec![0.0; n],
            d1: vec![0.0; n],
            d2: vec![0.0; n],
            noise_term: vec![0.0; n],
            sigma: vec![0.0; n * d],
            scratch: vec![0.0; n],
            x_buf: vec![0.0; n],
            y_buf: vec![0.0; n],
        }
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    fn check_noise(&self, noise: &NoiseRealization) -> Result<(), SchemeError> {
        if noise.steps != self.grid.steps {
            return Err(SchemeError::NoiseMismatch(format!(
                "noise has {} steps, grid has {}",
                noise.steps, self.grid.steps
            )));
        }
        if (noise.delta - self.config.delta).abs() > GRID_TOL * self.config.delta {
            return Err(SchemeError::NoiseMismatch(format!(
                "noise delta {} differs from scheme delta {}",
                noise.delta, self.config.delta
            )));
        }
        match (self.kind, noise.is_brownian()) {
            (DriverKind::Brownian, true) | (DriverKind::Jump, false) => {}
            _ => {
                return Err(SchemeError::NoiseMismatch(format!(
                    "equation is driven by {} noise",
                    self.kind
                )))
            }
        }
        if let Some(inc) = noise.increment(0) {
            if inc.len() != self.d {
                return Err(SchemeError::NoiseMismatch(format!(
                    "noise dimension {} differs from dim_noise {}",
                    inc.len(),
                    self.d
                )));
            }
        }
        Ok(())
    }

    fn empty_path(&self, noise: &NoiseRealization, with_z: bool) -> GridPath {
        let mut path = GridPath::new(self.n, self.config.delta, self.grid, with_z);
        let seed = noise.path_seed();
        for k in -(self.grid.m as i64)..=0 {
            let t = k as f64 * self.config.delta;
            self.spec.initial.eval(seed, t, path.y_mut(k));
        }
        if let Some(z) = path.z.as_mut() {
            let len = self.grid.m * self.n;
            let (zh, yh) = (&mut z[..len], &path.y[..len]);
            zh.copy_from_slice(yh);
        }
        path
    }

    /// `G_k` at `(x, y)` = `(y_k, y_{k-m})`, written into `self.noise_term`.
    fn noise_term(&mut self, k: usize, noise: &NoiseRealization) {
        let (x, y) = (&self.x_buf, &self.y_buf);
        match self.kind {
            DriverKind::Brownian => {
                let sigma = self.spec.diffusion.as_ref().expect("brownian driver");
                sigma(x, y, &mut self.sigma);
                let dw = noise.increment(k).expect("brownian noise");
                for i in 0..self.n {
                    let row = &self.sigma[i * self.d..(i + 1) * self.d];
                    let mut acc = row[0] * dw[0];
                    for j in 1..self.d {
                        acc += row[j] * dw[j];
                    }
                    self.noise_term[i] = acc;
                }
            }
            DriverKind::Jump => {
                let jump = self.spec.jump.as_ref().expect("jump driver");
                let events = noise.events(k).expect("jump noise");
                crate::drivers::compensated_jump_integral(
                    events,
                    &jump.measure,
                    &jump.coeff,
                    x,
                    y,
                    self.config.delta,
                    &mut self.noise_term,
                    &mut self.scratch,
                );
            }
        }
    }

    /// Solves `v = rhs + θΔ b(v, y_d)` with `self.rhs` as right-hand side and
    /// `self.y_buf` as `y_d`; the solution is left in `self.v`.
    ///
    /// Damped iteration `v ← v + ω(G(v) - v)`. `ω` is halved when two
    /// successive updates point in opposite directions (oscillation) and
    /// grows by 1.5 (up to 1) when they agree. A trial that does not lower
    /// the residual is rejected and retried with half the damping.
    fn solve(&mut self) -> Result<StepStats, SchemeError> {
        let theta_delta = self.config.theta * self.config.delta;
        self.v.copy_from_slice(&self.rhs);
        if theta_delta == 0.0 {
            return Ok(StepStats::default());
        }
        let tol = self.config.solver_tol;
        let mut omega = 1.0f64;
        let mut have_prev = false;
        let mut residual = self.fixed_point_map(theta_delta, false);
        if !residual.is_finite() {
            return Err(SchemeError::NonFiniteIterate { step: None });
        }
        for it in 1..=self.config.solver_max_iter {
            if residual <= tol * (1.0 + model::norm(&self.v)) {
                return Ok(StepStats { iters: it, residual });
            }
            if have_prev {
                let mut dot = 0.0;
                for i in 0..self.n {
                    dot += (self.g[i] - self.v[i]) * self.prev_update[i];
                }
                omega = if dot < 0.0 { 0.5 * omega } else { (1.5 * omega).min(1.0) };
            }
            for i in 0..self.n {
                self.trial[i] = self.v[i] + omega * (self.g[i] - self.v[i]);
            }
            let r = self.fixed_point_map(theta_delta, true);
            if r.is_finite() && r < residual {
                for i in 0..self.n {
                    self.prev_update[i] = self.g[i] - self.v[i];
                }
                have_prev = true;
                std::mem::swap(&mut self.v, &mut self.trial);
                std::mem::swap(&mut self.g, &mut self.g_trial);
                residual = r;
            } else {
                omega *= 0.5;
                if omega < MIN_DAMPING {
                    break;
                }
            }
        }
        Err(SchemeError::SolverDiverged {
            step: None,
            iters: self.config.solver_max_iter,
            residual,
        })
    }

    /// `G(v) = rhs + θΔ b(v, y_d)` for `v = self.v` (into `self.g`) or
    /// `v = self.trial` (into `self.g_trial`); returns `|G(v) - v|`.
    fn fixed_point_map(&mut self, theta_delta: f64, trial: bool) -> f64 {
        let (v, g) = if trial { (&self.trial, &mut self.g_trial) } else { (&self.v, &mut self.g) };
        self.spec.eval_drift(v, &self.y_buf, &mut self.b);
        let mut res_sq = 0.0;
        for i in 0..self.n {
            g[i] = self.rhs[i] + theta_delta * self.b[i];
            let r = g[i] - v[i];
            res_sq += r * r;
        }
        res_sq.sqrt()
    }

    /// Direct θ-EM step: fills `y_{k+1}` from `y_{..=k}`.
    pub fn step(
        &mut self,
        k: usize,
        path: &mut GridPath,
        noise: &NoiseRealization,
    ) -> Result<(), SchemeError> {
        let (m, ki) = (self.grid.m as i64, k as i64);
        let one_minus = 1.0 - self.config.theta;
        let delta = self.config.delta;
        self.x_buf.copy_from_slice(path.y(ki));
        self.y_buf.copy_from_slice(path.y(ki - m));
        self.spec.eval_neutral(path.y(ki + 1 - m), &mut self.d1);
        self.spec.eval_neutral(&self.y_buf, &mut self.d2);
        self.spec.eval_drift(&self.x_buf, &self.y_buf, &mut self.b);
        self.noise_term(k, noise);
        let coef = one_minus * delta;
        for i in 0..self.n {
            let mut acc = self.d1[i];
            acc += self.x_buf[i];
            acc -= self.d2[i];
            acc += coef * self.b[i];
            acc += self.noise_term[i];
            self.rhs[i] = acc;
        }
        self.y_buf.copy_from_slice(path.y(ki + 1 - m));
        let stats = self.solve().map_err(|e| e.at(k + 1))?;
        path.y_mut(ki + 1).copy_from_slice(&self.v);
        path.stats[k + 1] = stats;
        Ok(())
    }

    /// Direct θ-EM path.
    pub fn simulate(&mut self, noise: &NoiseRealization) -> Result<GridPath, SchemeError> {
        self.check_noise(noise)?;
        let mut path = self.empty_path(noise, false);
        for k in 0..self.grid.steps {
            self.step(k, &mut path, noise)?;
        }
        Ok(path)
    }

    /// Split-step θ-EM path (fills both `y` and `z`).
    pub fn simulate_split(&mut self, noise: &NoiseRealization) -> Result<GridPath, SchemeError> {
        self.check_noise(noise)?;
        let mut path = self.empty_path(noise, true);
        let m = self.grid.m as i64;
        let n = self.n;
        let theta_delta = self.config.theta * self.config.delta;
        let delta = self.config.delta;

        // z_0 = ξ(0) - θΔ b(ξ(0), ξ(-τ))
        self.spec.eval_drift(path.y(0), path.y(-m), &mut self.b);
        let z0: Vec<f64> = (0..n).map(|i| path.y(0)[i] - theta_delta * self.b[i]).collect();
        set_z(&mut path, 0, &z0);

        for k in 0..=self.grid.steps as i64 {
            if k > 0 {
                // y_k = D(y_{k-m}) + z_k - D(z_{k-m}) + θΔ b(y_k, y_{k-m})
                self.spec.eval_neutral(path.y(k - m), &mut self.d1);
                self.spec.eval_neutral(path.z(k - m).unwrap(), &mut self.d2);
                let zk = path.z(k).unwrap();
                for i in 0..n {
                    let mut acc = self.d1[i];
                    acc += zk[i];
                    acc -= self.d2[i];
                    self.rhs[i] = acc;
                }
                self.y_buf.copy_from_slice(path.y(k - m));
                let stats = self.solve().map_err(|e| e.at(k as usize))?;
                path.y_mut(k).copy_from_slice(&self.v);
                path.stats[k as usize] = stats;
            }
            if k == self.grid.steps as i64 {
                break;
            }
            // z_{k+1} = D(z_{k+1-m}) + z_k - D(z_{k-m}) + Δ b(y_k, y_{k-m}) + G_k
            self.x_buf.copy_from_slice(path.y(k));
            self.y_buf.copy_from_slice(path.y(k - m));
            self.spec.eval_drift(&self.x_buf, &self.y_buf, &mut self.b);
            self.noise_term(k as usize, noise);
            self.spec.eval_neutral(path.z(k + 1 - m).unwrap(), &mut self.d1);
            self.spec.eval_neutral(path.z(k - m).unwrap(), &mut self.d2);
            let zk = path.z(k).unwrap();
            let next: Vec<f64> = (0..n)
                .map(|i| {
                    let mut acc = self.d1[i];
                    acc += zk[i];
                    acc -= self.d2[i];
                    acc += delta * self.b[i];
                    acc + self.noise_term[i]
                })
                .collect();
            set_z(&mut path, k + 1, &next);
        }
        Ok(path)
    }

    /// Rebuilds `z_k` from a direct path through
    /// `z_k = y_k - D(y_{k-m}) + D(z_{k-m}) - θΔ b(y_k, y_{k-m})`.
    pub fn reconstruct_z(&mut self, path: &GridPath) -> GridPath {
        let mut out = GridPath { z: Some(vec![0.0; path.y.len()]), ..path.clone() };
        let m = self.grid.m as i64;
        let theta_delta = self.config.theta * self.config.delta;
        let len = self.grid.m * self.n;
        out.z.as_mut().unwrap()[..len].copy_from_slice(&path.y[..len]);
        for k in 0..=self.grid.steps as i64 {
            self.spec.eval_neutral(path.y(k - m), &mut self.d1);
            self.spec.eval_neutral(out.z(k - m).unwrap(), &mut self.d2);
            self.spec.eval_drift(path.y(k), path.y(k - m), &mut self.b);
            let yk = path.y(k);
            let zk: Vec<f64> = (0..self.n)
                .map(|i| yk[i] - self.d1[i] + self.d2[i] - theta_delta * self.b[i])
                .collect();
            set_z(&mut out, k, &zk);
        }
        out
    }
}

fn set_z(path: &mut GridPath, k: i64, value: &[f64]) {
    let o = path.offset(k);
    let dim = path.dim;
    path.z.as_mut().expect("split-step path")[o..o + dim].copy_from_slice(value);
}

/// Solves `v = rhs + θΔ b(v, y_delayed)` by damped fixed-point iteration
/// started at `rhs`.
pub fn implicit_solve(
    rhs: &[f64],
    y_delayed: &[f64],
    spec: &EquationSpec,
    config: &SchemeConfig,
) -> Result<(Vec<f64>, StepStats), SchemeError> {
    if rhs.iter().any(|v| !v.is_finite()) {
        return Err(SchemeError::NonFiniteIterate { step: None });
    }
    let grid = Grid { m: 1, steps: 1 };
    let mut sim = Simulator::with_grid(spec, config, grid);
    sim.rhs.copy_from_slice(rhs);
    sim.y_buf.copy_from_slice(y_delayed);
    let stats = sim.solve()?;
    Ok((sim.v, stats))
}

/// Direct path for one realization.
pub fn simulate_path(
    spec: &EquationSpec,
    config: &SchemeConfig,
    noise: &NoiseRealization,
) -> Result<GridPath, SchemeError> {
    Simulator::new(spec, config)?.simulate(noise)
}

/// Split-step path for one realization.
pub fn simulate_split_step(
    spec: &EquationSpec,
    config: &SchemeConfig,
    noise: &NoiseRealization,
) -> Result<GridPath, SchemeError> {
    Simulator::new(spec, config)?.simulate_split(noise)
}

/// One direct Brownian step: `y_{k+1}` given a path filled through `k`.
pub fn step_brownian(
    k: usize,
    path: &GridPath,
    noise: &NoiseRealization,
    spec: &EquationSpec,
    config: &SchemeConfig,
) -> Result<Vec<f64>, SchemeError> {
    if spec.driver()? != DriverKind::Brownian || !noise.is_brownian() {
        return Err(SchemeError::NoiseMismatch("step_brownian needs Brownian noise".into()));
    }
    single_step(k, path, noise, spec, config)
}

/// One direct jump step: `y_{k+1}` given a path filled through `k`.
pub fn step_jump(
    k: usize,
    path: &GridPath,
    noise: &NoiseRealization,
    spec: &EquationSpec,
    config: &SchemeConfig,
) -> Result<Vec<f64>, SchemeError> {
    if spec.driver()? != DriverKind::Jump || noise.is_brownian() {
        return Err(SchemeError::NoiseMismatch("step_jump needs jump noise".into()));
    }
    single_step(k, path, noise, spec, config)
}

fn single_step(
    k: usize,
    path: &GridPath,
    noise: &NoiseRealization,
    spec: &EquationSpec,
    config: &SchemeConfig,
) -> Result<Vec<f64>, SchemeError> {
    let grid = config.grid(spec)?;
    if k >= grid.steps || path.m != grid.m || path.steps != grid.steps {
        return Err(SchemeError::NoiseMismatch(format!("step {k} outside the path grid")));
    }
    let mut sim = Simulator::with_grid(spec, config, grid);
    sim.check_noise(noise)?;
    let mut work = path.clone();
    sim.step(k, &mut work, noise)?;
    Ok(work.y(k as i64 + 1).to_vec())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InterpolantKind {
    /// `Ȳ(t) = y_k` on `[t_k, t_{k+1})`.
    Step,
    /// `Z(t)`, grid points only.
    ContinuousZ,
    /// `Y(t)` from `Y(t) - D(Y(t-τ)) = Z(t) - D(Z(t-τ)) + θΔ b(Y(t), Y(t-τ))`,
    /// grid points only.
    ContinuousY,
}

/// Evaluates an interpolant of `path` at time `t ∈ [-τ, T]`.
pub fn interpolate(
    path: &GridPath,
    noise: &NoiseRealization,
    spec: &EquationSpec,
    config: &SchemeConfig,
    t: f64,
    kind: InterpolantKind,
) -> Result<Vec<f64>, SchemeError> {
    let grid = config.grid(spec)?;
    let delta = config.delta;
    let eps = GRID_TOL * delta;
    if t < -spec.delay - eps || t > spec.horizon + eps {
        return Err(SchemeError::TimeOutOfRange { t, delay: spec.delay, horizon: spec.horizon });
    }
    let scaled = t / delta;
    let nearest = scaled.round();
    let on_grid = (scaled - nearest).abs() <= GRID_TOL * nearest.abs().max(1.0);
    if t < -eps && !on_grid {
        let mut out = vec![0.0; spec.dim_state];
        spec.initial.eval(noise.path_seed(), t, &mut out);
        return Ok(out);
    }
    let clamp = |k: i64| k.clamp(-(grid.m as i64), grid.steps as i64);
    match kind {
        InterpolantKind::Step => {
            let k = if on_grid { nearest as i64 } else { scaled.floor() as i64 };
            Ok(path.y(clamp(k)).to_vec())
        }
        InterpolantKind::ContinuousZ | InterpolantKind::ContinuousY => {
            if !on_grid {
                return Err(SchemeError::OffGridContinuousQuery(t));
            }
            let k = clamp(nearest as i64);
            if k < 0 {
                return Ok(path.y(k).to_vec());
            }
            let mut sim = Simulator::with_grid(spec, config, grid);
            let owned;
            let zpath = if path.has_z() {
                path
            } else {
                owned = sim.reconstruct_z(path);
                &owned
            };
            let m = grid.m as i64;
            if kind == InterpolantKind::ContinuousZ {
                return Ok(zpath.z(k).unwrap().to_vec());
            }
            spec.eval_neutral(path.y(k - m), &mut sim.d1);
            spec.eval_neutral(zpath.z(k - m).unwrap(), &mut sim.d2);
            let zk = zpath.z(k).unwrap();
            for i in 0..spec.dim_state {
                sim.rhs[i] = sim.d1[i] + zk[i] - sim.d2[i];
            }
            sim.y_buf.copy_from_slice(path.y(k - m));
            sim.solve().map_err(|e| e.at(k as usize))?;
            Ok(sim.v)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::drivers::{brownian_realization, jump_realization, JumpEvents, Noise};
    use crate::model::{
        builtin_problem, builtin_problem_with, AssumptionConstants, BuiltinParams, Envelope, InitialPath, JumpPart, MarkMeasure,
    };
    use std::sync::Arc;

    fn constants() -> AssumptionConstants {
        AssumptionConstants::new(1.0, 1.0, 1.0, 1.0, [Envelope::new(1.0, 1.0); 3]).unwrap()
    }

    fn scalar_spec(
        neutral: fn(f64) -> f64,
        drift: fn(f64, f64) -> f64,
        diffusion: fn(f64, f64) -> f64,
        xi: f64,
    ) -> EquationSpec {
        EquationSpec {
            name: "scalar".into(),
            dim_state: 1,
            dim_noise: 1,
            delay: 1.0,
            horizon: 2.0,
            neutral: Arc::new(move |y: &[f64], o: &mut [f64]| o[0] = neutral(y[0])),
            drift: Arc::new(move |x: &[f64], y: &[f64], o: &mut [f64]| o[0] = drift(x[0], y[0])),
            diffusion: Some(Arc::new(move |x: &[f64], y: &[f64], o: &mut [f64]| {
                o[0] = diffusion(x[0], y[0])
            })),
            jump: None,
            initial: InitialPath::constant(vec![xi]),
            constants: constants(),
            exact: None,
        }
    }

    fn zero_noise(delta: f64, steps: usize) -> NoiseRealization {
        NoiseRealization {
            delta,
            steps,
            master_seed: 0,
            path_index: 0,
            noise: Noise::Brownian { dim: 1, increments: vec![0.0; steps] },
        }
    }

    #[test]
    fn step_bound_arithmetic() {
        let mut c = constants();
        c.k_monotone = 4.0;
        assert_eq!(max_stable_step(&c, 1.0), 0.125);
        c.k_monotone = 1.0;
        assert_eq!(max_stable_step(&c, 0.5), 0.5);
        assert_eq!(max_stable_step(&c, 0.0), f64::INFINITY);
    }

    #[test]
    fn linear_implicit_solve() {
        let spec = scalar_spec(|_| 0.0, |x, _| -x, |_, _| 0.0, 0.0);
        let cfg = SchemeConfig::new(1.0, 0.1);
        let (v, st) = implicit_solve(&[1.1], &[0.0], &spec, &cfg).unwrap();
        assert!((v[0] - 1.0).abs() < 1e-11, "{}", v[0]);
        assert!(st.residual <= 1e-12 * (1.0 + v[0].abs()));

        let explicit = SchemeConfig::new(0.0, 0.1);
        let (v, st) = implicit_solve(&[1.1], &[0.0], &spec, &explicit).unwrap();
        assert_eq!(v[0], 1.1);
        assert_eq!(st.iters, 0);
    }

    #[test]
    fn cubic_residuals_meet_tolerance() {
        let spec = builtin_problem("cubic-neutral").unwrap();
        let cfg = SchemeConfig::new(0.5, 1e-3);
        let mut s = 0x1234_5678u64;
        for _ in 0..200 {
            s = crate::drivers::splitmix64(s);
            let rhs = (s >> 11) as f64 / (1u64 << 53) as f64 * 4.0 - 2.0;
            let yd = ((s >> 7) & 0xff) as f64 / 128.0 - 1.0;
            let (v, _) = implicit_solve(&[rhs], &[yd], &spec, &cfg).unwrap();
            let b = v[0] - v[0].powi(3) + yd.powi(3);
            let r = (v[0] - rhs - 0.5 * 1e-3 * b).abs();
            assert!(r <= 1e-12 * (1.0 + v[0].abs()), "residual {r}");
        }
    }

    #[test]
    fn damping_rescues_oscillating_iteration() {
        // g'(v) = -θΔ·40 = -2: undamped iteration oscillates and diverges
        let spec = scalar_spec(|_| 0.0, |x, _| -40.0 * x, |_, _| 0.0, 0.0);
        let mut cfg = SchemeConfig::new(1.0, 0.05);
        cfg.solver_max_iter = 500;
        let (v, _) = implicit_solve(&[3.0], &[0.0], &spec, &cfg).unwrap();
        assert!((v[0] - 1.0).abs() < 1e-10, "{}", v[0]);
    }

    #[test]
    fn nonconvergence_is_reported() {
        let spec = scalar_spec(|_| 0.0, |x, _| -40.0 * x, |_, _| 0.0, 0.0);
        let mut cfg = SchemeConfig::new(1.0, 0.05);
        cfg.solver_max_iter = 3;
        assert!(matches!(
            implicit_solve(&[3.0], &[0.0], &spec, &cfg),
            Err(SchemeError::SolverDiverged { iters: 3, .. })
        ));
        let nan = scalar_spec(|_| 0.0, |_, _| f64::NAN, |_, _| 0.0, 0.0);
        assert!(matches!(
            implicit_solve(&[1.0], &[0.0], &nan, &cfg),
            Err(SchemeError::NonFiniteIterate { .. })
        ));
    }

    #[test]
    fn config_invariants() {
        let spec = builtin_problem("cubic-neutral").unwrap();
        assert!(matches!(
            SchemeConfig::new(1.0, 0.25).grid(&spec),
            Err(SchemeError::StepTooLarge { .. })
        ));
        // exactly at the bound is rejected
        assert!(SchemeConfig::new(1.0, 0.125).grid(&spec).is_err());
        assert_eq!(SchemeConfig::new(1.0, 0.0625).grid(&spec).unwrap(), Grid { m: 8, steps: 16 });
        assert!(matches!(
            SchemeConfig::new(0.5, 0.3).grid(&spec),
            Err(SchemeError::NonIntegerGrid { .. }) | Err(SchemeError::StepTooLarge { .. })
        ));
        assert!(matches!(
            SchemeConfig::new(0.5, 0.03).grid(&spec),
            Err(SchemeError::NonIntegerGrid { what: "delay", .. })
        ));
        assert!(matches!(SchemeConfig::new(1.5, 0.01).grid(&spec), Err(SchemeError::InvalidTheta(_))));
        assert!(matches!(
            SchemeConfig::new(0.25, 0.0625).grid(&spec),
            Err(SchemeError::LowThetaNotAllowed(_))
        ));
        let gbm = builtin_problem("gbm-nodelay").unwrap();
        let mut low = SchemeConfig::new(0.0, 0.0625);
        assert!(low.validate(&gbm).is_err());
        low.allow_low_theta = true;
        assert!(low.validate(&gbm).is_ok());
        // cubic drift is not linearly growing
        let mut cubic = builtin_problem("cubic-neutral").unwrap();
        cubic.constants.linear_growth = Some(1.0);
        assert!(matches!(low.validate(&cubic), Err(SchemeError::LinearGrowthViolated { .. })));
    }

    #[test]
    fn identity_and_explicit_euler_steps() {
        let zero = scalar_spec(|_| 0.0, |_, _| 0.0, |_, _| 0.0, 0.7);
        let cfg = SchemeConfig::new(0.5, 0.1);
        let noise = brownian_realization(1, 0, 0.1, 20, 1).unwrap();
        let path = simulate_path(&zero, &cfg, &noise).unwrap();
        assert!(path.y_values().iter().all(|&v| v == 0.7));

        let mut lin = scalar_spec(|_| 0.0, |x, _| x, |_, _| 0.0, 1.0);
        lin.constants.linear_growth = Some(1.0);
        let mut cfg = SchemeConfig::new(0.0, 0.1);
        cfg.allow_low_theta = true;
        let path = simulate_path(&lin, &cfg, &zero_noise(0.1, 20)).unwrap();
        assert_eq!(step_brownian(0, &path, &zero_noise(0.1, 20), &lin, &cfg).unwrap(), vec![1.1]);
        assert_eq!(path.y(1), &[1.1]);
    }

    fn bisect(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
        assert!(f(lo) * f(hi) < 0.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if f(lo) * f(mid) <= 0.0 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn backward_cubic_step_matches_bisection() {
        let params = BuiltinParams { xi: 0.5, ..BuiltinParams::default() };
        let spec = builtin_problem_with("cubic-neutral", &params).unwrap();
        let delta = 1.0 / 16.0;
        let cfg = SchemeConfig::new(1.0, delta);
        let noise = zero_noise(delta, 16);
        let path = simulate_path(&spec, &cfg, &noise).unwrap();
        let got = step_brownian(0, &path, &noise, &spec, &cfg).unwrap()[0];
        // y1 + 0.125 = 0.5 + 0.125 + Δ(y1 - y1³ + 0.125) with ξ ≡ 0.5
        let d = |y: f64| -y.powi(3);
        let b = |x: f64, y: f64| x - x.powi(3) + y.powi(3);
        let oracle = bisect(|v| v - d(0.5) - (0.5 - d(0.5)) - delta * b(v, 0.5), 0.0, 2.0);
        assert!((got - oracle).abs() < 1e-10, "{got} vs {oracle}");
    }

    fn jump_spec(
        drift: fn(f64, f64) -> f64,
        h: fn(f64, f64, f64) -> f64,
        measure: MarkMeasure,
    ) -> EquationSpec {
        let mut spec = scalar_spec(|_| 0.0, drift, |_, _| 0.0, 1.0);
        spec.diffusion = None;
        spec.jump = Some(JumpPart {
            coeff: Arc::new(move |x: &[f64], y: &[f64], u: &[f64], o: &mut [f64]| {
                o[0] = h(x[0], y[0], u[0])
            }),
            measure,
        });
        spec
    }

    fn jump_noise(delta: f64, per_step: Vec<Vec<u32>>) -> NoiseRealization {
        let mut offsets = vec![0];
        let mut atoms = vec![];
        for s in &per_step {
            atoms.extend_from_slice(s);
            offsets.push(atoms.len());
        }
        NoiseRealization {
            delta,
            steps: per_step.len(),
            master_seed: 0,
            path_index: 0,
            noise: Noise::Jump(JumpEvents { offsets, atoms }),
        }
    }

    #[test]
    fn jump_step_cases() {
        let delta = 0.1;
        let mut cfg = SchemeConfig::new(0.5, delta);
        cfg.solver_tol = 1e-15;
        let measure = MarkMeasure::single(0.3, 1.0).unwrap();
        let spec = jump_spec(|_, _| 0.0, |_, _, u| u, measure.clone());
        let mut events = vec![vec![]; 20];
        events[0] = vec![0];
        let noise = jump_noise(delta, events);
        let path = simulate_path(&spec, &cfg, &noise).unwrap();
        let y1 = step_jump(0, &path, &noise, &spec, &cfg).unwrap()[0];
        assert!((y1 - (1.0 + 0.3 - 0.03)).abs() < 1e-15);

        // h ≡ 0 reduces to the drift-only θ step
        let spec = jump_spec(|x, _| -x, |_, _, _| 0.0, measure);
        let path = simulate_path(&spec, &cfg, &noise).unwrap();
        // y1 = 1 + Δ(θ(-y1) + (1-θ)(-1))  =>  y1 = (1 - 0.05) / 1.05
        assert!((path.y(1)[0] - 0.95 / 1.05).abs() < 1e-12, "{}", path.y(1)[0]);
    }

    #[test]
    fn cubic_jump_step_matches_expanded_formula() {
        let spec = builtin_problem("cubic-neutral-jump").unwrap();
        let delta = 1.0 / 32.0;
        let mut cfg = SchemeConfig::new(0.5, delta);
        cfg.solver_tol = 1e-15;
        let measure = spec.jump.as_ref().unwrap().measure.clone();
        let noise = jump_realization(9, 4, delta, 32, &measure).unwrap();
        let path = simulate_path(&spec, &cfg, &noise).unwrap();
        let m = 16i64;
        let d = |y: f64| -y.powi(3);
        let b = |x: f64, y: f64| x - x.powi(3) + y.powi(3);
        let h = |x: f64, y: f64, u: f64| (x + y * y) * u;
        for k in [0i64, 10, 15, 16, 20, 31] {
            let (yk, ykm, yk1m) = (path.y(k)[0], path.y(k - m)[0], path.y(k + 1 - m)[0]);
            let events = noise.events(k as usize).unwrap();
            let jumps: f64 = events.iter().map(|&e| h(yk, ykm, measure.mark(e as usize)[0])).sum();
            let comp: f64 = measure.atoms().map(|(u, w)| h(yk, ykm, u[0]) * w).sum::<f64>() * delta;
            let y1 = path.y(k + 1)[0];
            let lhs = y1 - d(yk1m);
            let rhs = yk - d(ykm) + 0.5 * delta * b(y1, yk1m) + 0.5 * delta * b(yk, ykm) + jumps - comp;
            assert!((lhs - rhs).abs() < 1e-12, "k = {k}: {lhs} vs {rhs}");
        }
    }

    #[test]
    fn explicit_gbm_matches_textbook_recursion() {
        let spec = builtin_problem("gbm-nodelay").unwrap();
        let delta = 1.0 / 64.0;
        let mut cfg = SchemeConfig::new(0.0, delta);
        cfg.allow_low_theta = true;
        let noise = brownian_realization(5, 2, delta, 64, 1).unwrap();
        let path = simulate_path(&spec, &cfg, &noise).unwrap();
        let (mu, s) = (0.05, 0.2);
        let mut y = 1.0f64;
        for k in 0..64 {
            let dw = noise.increment(k).unwrap()[0];
            y = y + mu * y * delta + s * y * dw;
            assert_eq!(path.y(k as i64 + 1)[0].to_bits(), y.to_bits(), "step {k}");
        }
    }

    #[test]
    fn split_step_equals_direct() {
        for name in ["cubic-neutral", "cubic-neutral-jump"] {
            let spec = builtin_problem(name).unwrap();
            for theta in [0.5, 1.0] {
                let delta = 1.0 / 64.0;
                let cfg = SchemeConfig::new(theta, delta);
                let noise = match &spec.jump {
                    Some(j) => jump_realization(3, 1, delta, 64, &j.measure).unwrap(),
                    None => brownian_realization(3, 1, delta, 64, 1).unwrap(),
                };
                let a = simulate_path(&spec, &cfg, &noise).unwrap();
                let b = simulate_split_step(&spec, &cfg, &noise).unwrap();
                for k in -32..=64i64 {
                    let (u, v) = (a.y(k)[0], b.y(k)[0]);
                    assert!((u - v).abs() <= 1e-10 * (1.0 + u.abs()), "{name} θ={theta} k={k}");
                }
                for k in -32..0i64 {
                    assert_eq!(b.z(k).unwrap(), b.y(k));
                }
            }
        }
    }

    #[test]
    fn split_step_zero_coefficients() {
        let zero = scalar_spec(|_| 0.0, |_, _| 0.0, |_, _| 0.0, 0.3);
        let cfg = SchemeConfig::new(1.0, 0.1);
        let noise = brownian_realization(1, 0, 0.1, 20, 1).unwrap();
        let p = simulate_split_step(&zero, &cfg, &noise).unwrap();
        for k in -10..=20i64 {
            assert_eq!(p.y(k), &[0.3]);
            assert_eq!(p.z(k).unwrap(), &[0.3]);
        }
    }

    #[test]
    fn interpolants_on_and_off_grid() {
        let spec = builtin_problem("cubic-neutral").unwrap();
        let delta = 1.0 / 16.0;
        let cfg = SchemeConfig::new(0.5, delta);
        let noise = brownian_realization(2, 0, delta, 16, 1).unwrap();
        let direct = simulate_path(&spec, &cfg, &noise).unwrap();
        let split = simulate_split_step(&spec, &cfg, &noise).unwrap();
        for k in [0i64, 1, 5, 8, 15, 16] {
            let t = k as f64 * delta;
            let step = interpolate(&direct, &noise, &spec, &cfg, t, InterpolantKind::Step).unwrap();
            assert_eq!(step, direct.y(k));
            let y = interpolate(&direct, &noise, &spec, &cfg, t, InterpolantKind::ContinuousY).unwrap();
            assert!((y[0] - direct.y(k)[0]).abs() < 1e-10);
            let z = interpolate(&direct, &noise, &spec, &cfg, t, InterpolantKind::ContinuousZ).unwrap();
            assert!((z[0] - split.z(k).unwrap()[0]).abs() < 1e-10);
        }
        let mid = 5.5 * delta;
        assert_eq!(
            interpolate(&direct, &noise, &spec, &cfg, mid, InterpolantKind::Step).unwrap(),
            direct.y(5)
        );
        assert!(matches!(
            interpolate(&direct, &noise, &spec, &cfg, mid, InterpolantKind::ContinuousY),
            Err(SchemeError::OffGridContinuousQuery(_))
        ));
        for kind in [InterpolantKind::Step, InterpolantKind::ContinuousZ, InterpolantKind::ContinuousY] {
            assert_eq!(interpolate(&direct, &noise, &spec, &cfg, -0.25, kind).unwrap(), vec![0.2]);
        }
        assert!(interpolate(&direct, &noise, &spec, &cfg, 1.5, InterpolantKind::Step).is_err());
    }

    #[test]
    fn history_is_initial_path() {
        let spec = builtin_problem("cubic-neutral").unwrap();
        let cfg = SchemeConfig::new(0.5, 0.25 / 4.0);
        let noise = brownian_realization(4, 0, cfg.delta, 16, 1).unwrap();
        let path = simulate_path(&spec, &cfg, &noise).unwrap();
        let m = path.m();
        assert_eq!(model::history_value(&spec, &path, 0, m).unwrap(), vec![0.2]);
        assert_eq!(model::history_value(&spec, &path, m as i64, m).unwrap(), vec![0.2]);
        assert_eq!(
            model::history_value(&spec, &path, m as i64 + 2, m).unwrap(),
            path.y_values()[m + 2..m + 3].to_vec()
        );
        assert!(model::history_value(&spec, &path, -1, m).is_err());
        let a = model::history_value(&spec, &path, m as i64 + 7, m).unwrap();
        let b = model::history_value(&spec, &path, m as i64 + 7, m).unwrap();
        assert_eq!(a[0].to_bits(), b[0].to_bits());
    }

    #[test]
    fn residuals_recorded_within_tolerance() {
        let spec = builtin_problem("cubic-neutral").unwrap();
        let cfg = SchemeConfig::new(1.0, 1.0 / 64.0);
        let noise = brownian_realization(8, 3, cfg.delta, 64, 1).unwrap();
        let path = simulate_path(&spec, &cfg, &noise).unwrap();
        for k in 1..=64usize {
            let st = path.stats[k];
            assert!(st.iters >= 1);
            assert!(st.residual <= cfg.solver_tol * (1.0 + path.y(k as i64)[0].abs()));
        }
    }

    #[test]
    fn noise_mismatch_is_rejected() {
        let spec = builtin_problem("cubic-neutral").unwrap();
        let cfg = SchemeConfig::new(1.0, 1.0 / 16.0);
        let short = brownian_realization(1, 0, 1.0 / 16.0, 8, 1).unwrap();
        assert!(matches!(simulate_path(&spec, &cfg, &short), Err(SchemeError::NoiseMismatch(_))));
        let jumps = jump_realization(1, 0, 1.0 / 16.0, 16, &MarkMeasure::single(1.0, 1.0).unwrap()).unwrap();
        assert!(matches!(simulate_path(&spec, &cfg, &jumps), Err(SchemeError::NoiseMismatch(_))));
    }

    #[test]
    fn path_csv_layout() {
        let spec = builtin_problem("cubic-neutral").unwrap();
        let cfg = SchemeConfig::new(1.0, 0.0625);
        let noise = brownian_realization(1, 0, 0.0625, 16, 1).unwrap();
        let path = simulate_path(&spec, &cfg, &noise).unwrap();
        let mut buf = Vec::new();
        path.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("k,t,y_1,residual,iters"));
        assert_eq!(text.lines().count(), 1 + 8 + 17);
        assert!(lines.next().unwrap().starts_with("-8,"));
    }
}
