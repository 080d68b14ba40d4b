//! Monte Carlo studies: strong error order, moment bounds, the one-step gap
//! and a pathwise (almost sure) proxy.
//!
//! Each path index owns one fine noise realization. Every coarser resolution
//! of that path is obtained by [`coarsen`](crate::drivers::coarsen), so all
//! grids of a path see the same driver sample. Paths run on a rayon pool of
//! `workers` threads; per-path results are collected in path order and
//! reduced sequentially, so reports do not depend on the worker count.

use rayon::prelude::*;
use thiserror::Error;

use crate::drivers::{self, DriverError, NoiseRealization};
use crate::model::{DriverKind, EquationSpec};
use crate::scheme::{Grid, SchemeConfig, SchemeError, Simulator};

const GRID_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("path {path_index}, delta {delta}: {source}")]
    Path {
        path_index: u64,
        delta: f64,
        #[source]
        source: SchemeError,
    },
    #[error("delta {delta}: {source}")]
    Config {
        delta: f64,
        #[source]
        source: SchemeError,
    },
    #[error(transparent)]
    Driver(#[from] DriverError),
    #[error("degenerate fit: all deltas are equal")]
    DegenerateFit,
    #[error("cannot fit a log-log slope through error {error} at delta {delta}")]
    NonPositiveError { delta: f64, error: f64 },
    #[error("invalid study: {0}")]
    InvalidStudy(String),
}

/// What the coarse paths are compared against.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reference {
    /// The same scheme on the `delta_ref` grid.
    Scheme,
    /// The problem's closed-form solution evaluated on the fine Brownian path.
    ClosedForm,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyParams {
    pub theta: f64,
    pub p: f64,
    pub deltas: Vec<f64>,
    pub delta_ref: f64,
    pub n_paths: usize,
    pub master_seed: u64,
    pub workers: usize,
    pub reference: Reference,
    pub solver_tol: f64,
    pub solver_max_iter: u32,
    pub allow_low_theta: bool,
}

impl StudyParams {
    /// Defaults: `p = 2`, `n_paths = 1000`, `deltas = τ·2^-4..-8`,
    /// `delta_ref = τ·2^-12`, scheme reference.
    pub fn new(spec: &EquationSpec, theta: f64) -> Self {
        let tau = spec.delay;
        StudyParams {
            theta,
            p: 2.0,
            deltas: (4..=8).map(|j| tau / (1u64 << j) as f64).collect(),
            delta_ref: tau / 4096.0,
            n_paths: 1000,
            master_seed: 20240601,
            workers: 1,
            reference: Reference::Scheme,
            solver_tol: 1e-12,
            solver_max_iter: 200,
            allow_low_theta: false,
        }
    }

    pub fn scheme(&self, delta: f64) -> SchemeConfig {
        SchemeConfig {
            theta: self.theta,
            delta,
            solver_tol: self.solver_tol,
            solver_max_iter: self.solver_max_iter,
            allow_low_theta: self.allow_low_theta,
        }
    }

    fn sorted_deltas(&self) -> Result<Vec<f64>, HarnessError> {
        if self.deltas.is_empty() {
            return Err(HarnessError::InvalidStudy("no deltas given".into()));
        }
        let mut d = self.deltas.clone();
        d.sort_by(|a, b| b.total_cmp(a));
        if d.windows(2).any(|w| w[0] == w[1]) {
            return Err(HarnessError::InvalidStudy("deltas must be distinct".into()));
        }
        Ok(d)
    }

    fn check_common(&self) -> Result<(), HarnessError> {
        if self.n_paths < 2 {
            return Err(HarnessError::InvalidStudy("n_paths must be at least 2".into()));
        }
        if !(self.p > 0.0 && self.p.is_finite()) {
            return Err(HarnessError::InvalidStudy(format!("p = {} must be positive", self.p)));
        }
        if self.workers == 0 {
            return Err(HarnessError::InvalidStudy("workers must be at least 1".into()));
        }
        Ok(())
    }
}

/// Least-squares slope and its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Fit {
    pub slope: f64,
    pub stderr: f64,
}

/// OLS slope of `ln(error)` against `ln(delta)`.
pub fn fit_order(points: &[(f64, f64)]) -> Result<Fit, HarnessError> {
    if points.len() < 2 {
        return Err(HarnessError::DegenerateFit);
    }
    for &(delta, error) in points {
        if !(error > 0.0 && error.is_finite()) {
            return Err(HarnessError::NonPositiveError { delta, error });
        }
        if !(delta > 0.0 && delta.is_finite()) {
            return Err(HarnessError::NonPositiveError { delta, error: delta });
        }
    }
    let n = points.len() as f64;
    let xs: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx <= f64::EPSILON * mx.abs().max(1.0) {
        return Err(HarnessError::DegenerateFit);
    }
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let stderr = if points.len() > 2 {
        let intercept = my - slope * mx;
        let sse: f64 = xs
            .iter()
            .zip(&ys)
            .map(|(x, y)| {
                let r = y - intercept - slope * x;
                r * r
            })
            .sum();
        (sse / (n - 2.0) / sxx).sqrt()
    } else {
        0.0
    };
    Ok(Fit { slope, stderr })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StudyKind {
    Strong,
    JumpLp,
    YbarGap,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceRow {
    pub delta: f64,
    /// Sample mean of the per-path statistic (`max_k |e_k|^p` for the error
    /// studies).
    pub mean_sup_err_p: f64,
    /// `mean_sup_err_p^{1/p}`.
    pub lp_err: f64,
    /// Standard error of `mean_sup_err_p`.
    pub std_error: f64,
    pub n_paths: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceReport {
    pub kind: StudyKind,
    pub problem: String,
    pub theta: f64,
    pub p: f64,
    /// Sorted by decreasing delta.
    pub rows: Vec<ConvergenceRow>,
    /// Slope of `ln lp_err` against `ln delta`; `None` if some error is zero.
    pub fit: Option<Fit>,
    /// Slope of `ln mean_sup_err_p` against `ln delta`.
    pub raw_fit: Option<Fit>,
    pub delta_ref: f64,
    pub master_seed: u64,
    /// Gap study only: rows of the pathwise statistic
    /// `E[max_k |y_{k+1} - y_k|^p]`, whose slope carries a `log(1/Δ)`
    /// factor for diffusions.
    pub pathwise_rows: Option<Vec<ConvergenceRow>>,
}

impl ConvergenceReport {
    fn fill_fits(&mut self) {
        let lp: Vec<_> = self.rows.iter().map(|r| (r.delta, r.lp_err)).collect();
        let raw: Vec<_> = self.rows.iter().map(|r| (r.delta, r.mean_sup_err_p)).collect();
        self.fit = fit_order(&lp).ok();
        self.raw_fit = fit_order(&raw).ok();
    }

    pub fn pathwise_fit(&self) -> Option<Fit> {
        let rows = self.pathwise_rows.as_ref()?;
        fit_order(&rows.iter().map(|r| (r.delta, r.mean_sup_err_p)).collect::<Vec<_>>()).ok()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MomentRow {
    pub delta: f64,
    pub p: f64,
    /// Sample mean of `max_k |y_k|^p`.
    pub estimate: f64,
    pub std_error: f64,
    pub n_paths: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MomentReport {
    pub problem: String,
    pub theta: f64,
    /// Grouped by `p` (input order), deltas decreasing within a group.
    pub rows: Vec<MomentRow>,
    /// `(p, violation)` per moment order.
    pub flags: Vec<(f64, bool)>,
    pub master_seed: u64,
}

impl MomentReport {
    pub fn any_violation(&self) -> bool {
        self.flags.iter().any(|f| f.1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AsRow {
    pub delta: f64,
    pub max_ratio: f64,
    pub mean_ratio: f64,
    pub n_paths: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AsReport {
    pub problem: String,
    pub theta: f64,
    pub alpha: f64,
    pub rows: Vec<AsRow>,
    /// `ratios[i][j]` = `max_k |y_k - x_k| / delta_j^alpha` on path `i`.
    pub ratios: Vec<Vec<f64>>,
    pub fail: bool,
    pub delta_ref: f64,
    pub master_seed: u64,
}

/// Factor-2-over-three-halvings heuristic: `true` if some window of four
/// consecutive values (ordered by decreasing delta) is strictly increasing
/// and grows by more than a factor 2 overall.
pub fn grows_unboundedly(values: &[f64]) -> bool {
    values
        .windows(4)
        .any(|w| w[0] < w[1] && w[1] < w[2] && w[2] < w[3] && w[3] > 2.0 * w[0])
}

fn pool(workers: usize) -> rayon::ThreadPool {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .expect("thread pool")
}

/// Runs `f` on every path index and returns the results in path order, or
/// the error of the lowest failing path.
fn run_paths<T, F>(n_paths: usize, workers: usize, f: F) -> Result<Vec<T>, HarnessError>
where
    T: Send,
    F: Fn(u64) -> Result<T, HarnessError> + Sync,
{
    let results: Vec<Result<T, HarnessError>> =
        pool(workers).install(|| (0..n_paths as u64).into_par_iter().map(&f).collect());
    results.into_iter().collect()
}

fn mean_and_stderr(values: impl Iterator<Item = f64> + Clone, n: usize) -> (f64, f64) {
    let nf = n as f64;
    let mut sum = 0.0;
    for v in values.clone() {
        sum += v;
    }
    let mean = sum / nf;
    let mut ss = 0.0;
    for v in values {
        ss += (v - mean) * (v - mean);
    }
    let var = if n > 1 { ss / (nf - 1.0) } else { 0.0 };
    (mean, (var / nf).sqrt())
}

fn refinement_factor(delta: f64, fine: f64) -> Result<usize, HarnessError> {
    let ratio = delta / fine;
    let f = ratio.round();
    if f < 1.0 || (ratio - f).abs() > GRID_TOL * f {
        return Err(HarnessError::InvalidStudy(format!(
            "delta {delta} is not an integer multiple of {fine}"
        )));
    }
    Ok(f as usize)
}

fn validated(spec: &EquationSpec, cfg: &SchemeConfig) -> Result<Grid, HarnessError> {
    cfg.validate(spec)
        .map_err(|source| HarnessError::Config { delta: cfg.delta, source })
}

fn fine_noise(
    spec: &EquationSpec,
    kind: DriverKind,
    master_seed: u64,
    path_index: u64,
    delta: f64,
    steps: usize,
) -> Result<NoiseRealization, HarnessError> {
    Ok(match kind {
        DriverKind::Brownian => {
            drivers::brownian_realization(master_seed, path_index, delta, steps, spec.dim_noise)?
        }
        DriverKind::Jump => {
            let measure = &spec.jump.as_ref().expect("jump driver").measure;
            drivers::jump_realization(master_seed, path_index, delta, steps, measure)?
        }
    })
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

struct Coupled {
    deltas: Vec<f64>,
    factors: Vec<usize>,
    configs: Vec<SchemeConfig>,
    grids: Vec<Grid>,
    ref_config: SchemeConfig,
    ref_grid: Grid,
    kind: DriverKind,
}

fn coupled_setup(spec: &EquationSpec, params: &StudyParams) -> Result<Coupled, HarnessError> {
    params.check_common()?;
    let kind = spec
        .check_structure()
        .map_err(|e| HarnessError::Config { delta: params.delta_ref, source: e.into() })?;
    let deltas = params.sorted_deltas()?;
    if params.reference == Reference::ClosedForm {
        if spec.exact.is_none() || kind != DriverKind::Brownian {
            return Err(HarnessError::InvalidStudy(format!(
                "problem {} has no closed-form Brownian solution",
                spec.name
            )));
        }
    }
    let mut factors = Vec::new();
    for &d in &deltas {
        let f = refinement_factor(d, params.delta_ref)?;
        let min = if params.reference == Reference::Scheme { 2 } else { 1 };
        if f < min || !f.is_power_of_two() {
            return Err(HarnessError::InvalidStudy(format!(
                "delta {d} must be delta_ref·2^j with j >= {}",
                min.trailing_zeros()
            )));
        }
        factors.push(f);
    }
    let configs: Vec<SchemeConfig> = deltas.iter().map(|&d| params.scheme(d)).collect();
    let grids = configs.iter().map(|c| validated(spec, c)).collect::<Result<Vec<_>, _>>()?;
    let ref_config = params.scheme(params.delta_ref);
    let ref_grid = match params.reference {
        Reference::Scheme => validated(spec, &ref_config)?,
        Reference::ClosedForm => {
            let steps = refinement_factor(spec.horizon, params.delta_ref)?;
            let m = refinement_factor(spec.delay, params.delta_ref)?;
            Grid { m, steps }
        }
    };
    Ok(Coupled { deltas, factors, configs, grids, ref_config, ref_grid, kind })
}

/// Per path: `max_k |y_k - x(t_k)|` on every coarse grid.
fn sup_errors(
    spec: &EquationSpec,
    params: &StudyParams,
    setup: &Coupled,
) -> Result<Vec<Vec<f64>>, HarnessError> {
    let n = spec.dim_state;
    run_paths(params.n_paths, params.workers, |path_index| {
        let fine = fine_noise(
            spec,
            setup.kind,
            params.master_seed,
            path_index,
            params.delta_ref,
            setup.ref_grid.steps,
        )?;
        // reference values at fine grid points 0..=steps, row major
        let reference: Vec<f64> = match params.reference {
            Reference::Scheme => {
                let mut sim = Simulator::with_grid(spec, &setup.ref_config, setup.ref_grid);
                let path = sim.simulate(&fine).map_err(|source| HarnessError::Path {
                    path_index,
                    delta: params.delta_ref,
                    source,
                })?;
                let m = setup.ref_grid.m;
                path.y_values()[m * n..].to_vec()
            }
            Reference::ClosedForm => {
                let exact = spec.exact.as_ref().expect("checked");
                let w = fine.brownian_path()?;
                let d = spec.dim_noise;
                let mut out = vec![0.0; (setup.ref_grid.steps + 1) * n];
                for k in 0..=setup.ref_grid.steps {
                    let t = k as f64 * params.delta_ref;
                    exact(t, &w[k * d..(k + 1) * d], &mut out[k * n..(k + 1) * n]);
                }
                out
            }
        };
        let mut errs = Vec::with_capacity(setup.deltas.len());
        for j in 0..setup.deltas.len() {
            let factor = setup.factors[j];
            let coarse = drivers::coarsen(&fine, factor)?;
            let mut sim = Simulator::with_grid(spec, &setup.configs[j], setup.grids[j]);
            let path = sim.simulate(&coarse).map_err(|source| HarnessError::Path {
                path_index,
                delta: setup.deltas[j],
                source,
            })?;
            let mut sup = 0.0f64;
            for k in 0..=setup.grids[j].steps {
                let r = &reference[k * factor * n..(k * factor + 1) * n];
                sup = sup.max(dist(path.y(k as i64), r));
            }
            errs.push(sup);
        }
        Ok(errs)
    })
}

fn rows_from(per_path: &[Vec<f64>], deltas: &[f64], p: f64) -> Vec<ConvergenceRow> {
    let n = per_path.len();
    deltas
        .iter()
        .enumerate()
        .map(|(j, &delta)| {
            let (mean, se) = mean_and_stderr(per_path.iter().map(|v| v[j]), n);
            ConvergenceRow {
                delta,
                mean_sup_err_p: mean,
                lp_err: mean.powf(1.0 / p),
                std_error: se,
                n_paths: n,
            }
        })
        .collect()
}

fn error_report(
    spec: &EquationSpec,
    params: &StudyParams,
    kind: StudyKind,
) -> Result<ConvergenceReport, HarnessError> {
    let setup = coupled_setup(spec, params)?;
    if kind == StudyKind::JumpLp && setup.kind != DriverKind::Jump {
        return Err(HarnessError::InvalidStudy(format!("{} is not jump driven", spec.name)));
    }
    let sups = sup_errors(spec, params, &setup)?;
    let powered: Vec<Vec<f64>> =
        sups.iter().map(|v| v.iter().map(|e| e.powf(params.p)).collect()).collect();
    let mut report = ConvergenceReport {
        kind,
        problem: spec.name.clone(),
        theta: params.theta,
        p: params.p,
        rows: rows_from(&powered, &setup.deltas, params.p),
        fit: None,
        raw_fit: None,
        delta_ref: params.delta_ref,
        master_seed: params.master_seed,
        pathwise_rows: None,
    };
    report.fill_fits();
    Ok(report)
}

/// `E[max_k |y^Δ_k - y^ref(t_k)|^p]` over the coarse grids, with the slope of
/// its `p`-th root against `Δ`.
pub fn strong_error_study(
    spec: &EquationSpec,
    params: &StudyParams,
) -> Result<ConvergenceReport, HarnessError> {
    error_report(spec, params, StudyKind::Strong)
}

/// As [`strong_error_study`] for a jump-driven problem. The raw moment slope
/// (`raw_fit`) is the quantity of interest; the `p`-th root slope is
/// `raw / p`.
pub fn lp_error_exponent_jump(
    spec: &EquationSpec,
    params: &StudyParams,
) -> Result<ConvergenceReport, HarnessError> {
    error_report(spec, params, StudyKind::JumpLp)
}

/// Fine noise on the finest delta, coarsened to the others.
fn finest_setup(
    spec: &EquationSpec,
    params: &StudyParams,
) -> Result<(Vec<f64>, Vec<usize>, Vec<SchemeConfig>, Vec<Grid>, DriverKind), HarnessError> {
    params.check_common()?;
    let kind = spec
        .check_structure()
        .map_err(|e| HarnessError::Config { delta: params.delta_ref, source: e.into() })?;
    let deltas = params.sorted_deltas()?;
    let finest = *deltas.last().unwrap();
    let factors = deltas
        .iter()
        .map(|&d| refinement_factor(d, finest))
        .collect::<Result<Vec<_>, _>>()?;
    let configs: Vec<SchemeConfig> = deltas.iter().map(|&d| params.scheme(d)).collect();
    let grids = configs.iter().map(|c| validated(spec, c)).collect::<Result<Vec<_>, _>>()?;
    Ok((deltas, factors, configs, grids, kind))
}

/// `E[max_{0<=k<=M} |y_k|^p]` for every `p` in `p_list` and every delta.
pub fn moment_study(
    spec: &EquationSpec,
    params: &StudyParams,
    p_list: &[f64],
) -> Result<MomentReport, HarnessError> {
    if p_list.is_empty() || p_list.iter().any(|p| !(*p > 0.0)) {
        return Err(HarnessError::InvalidStudy("moment orders must be positive".into()));
    }
    let (deltas, factors, configs, grids, kind) = finest_setup(spec, params)?;
    let finest = *deltas.last().unwrap();
    let fine_steps = grids.last().unwrap().steps;
    // per path: max_k |y_k| per delta
    let sups = run_paths(params.n_paths, params.workers, |path_index| {
        let fine = fine_noise(spec, kind, params.master_seed, path_index, finest, fine_steps)?;
        let mut out = Vec::with_capacity(deltas.len());
        for j in 0..deltas.len() {
            let noise = drivers::coarsen(&fine, factors[j])?;
            let mut sim = Simulator::with_grid(spec, &configs[j], grids[j]);
            let path = sim.simulate(&noise).map_err(|source| HarnessError::Path {
                path_index,
                delta: deltas[j],
                source,
            })?;
            let sup = (0..=grids[j].steps as i64)
                .map(|k| crate::model::norm(path.y(k)))
                .fold(0.0f64, f64::max);
            out.push(sup);
        }
        Ok(out)
    })?;
    let n = sups.len();
    let mut rows = Vec::new();
    let mut flags = Vec::new();
    for &p in p_list {
        let mut estimates = Vec::new();
        for (j, &delta) in deltas.iter().enumerate() {
            let (mean, se) = mean_and_stderr(sups.iter().map(|v| v[j].powf(p)), n);
            estimates.push(mean);
            rows.push(MomentRow { delta, p, estimate: mean, std_error: se, n_paths: n });
        }
        let bad = grows_unboundedly(&estimates) || estimates.iter().any(|e| !e.is_finite());
        flags.push((p, bad));
    }
    Ok(MomentReport {
        problem: spec.name.clone(),
        theta: params.theta,
        rows,
        flags,
        master_seed: params.master_seed,
    })
}

/// Gap between the step interpolant and the scheme at the grid, realized as
/// the one-step displacement `|y_{k+1} - y_k|^p`.
///
/// `rows` hold the largest per-step moment `E|y_{k+1} - y_k|^p`, estimated
/// as the maximum over blocks of time (one block per step of the coarsest
/// delta) of the block-averaged sample moments. Blocks keep the number of
/// competing maxima independent of the step size, so sparse jump events do
/// not inflate the maximum at small steps. `pathwise_rows` hold
/// `E[max_k |y_{k+1} - y_k|^p]`.
pub fn ybar_gap_study(
    spec: &EquationSpec,
    params: &StudyParams,
) -> Result<ConvergenceReport, HarnessError> {
    let (deltas, factors, configs, grids, kind) = finest_setup(spec, params)?;
    let finest = *deltas.last().unwrap();
    let fine_steps = grids.last().unwrap().steps;
    let blocks = grids[0].steps;
    let widths = deltas
        .iter()
        .map(|&d| refinement_factor(deltas[0], d))
        .collect::<Result<Vec<_>, _>>()?;
    let p = params.p;
    // per path, per delta: (block means of |y_{k+1}-y_k|^p, max over k)
    let per_path = run_paths(params.n_paths, params.workers, |path_index| {
        let fine = fine_noise(spec, kind, params.master_seed, path_index, finest, fine_steps)?;
        let mut out = Vec::with_capacity(deltas.len());
        for j in 0..deltas.len() {
            let noise = drivers::coarsen(&fine, factors[j])?;
            let mut sim = Simulator::with_grid(spec, &configs[j], grids[j]);
            let path = sim.simulate(&noise).map_err(|source| HarnessError::Path {
                path_index,
                delta: deltas[j],
                source,
            })?;
            let width = widths[j];
            let mut block_means = vec![0.0; blocks];
            let mut sup = 0.0f64;
            for k in 0..grids[j].steps {
                let gap = dist(path.y(k as i64 + 1), path.y(k as i64)).powf(p);
                block_means[k / width] += gap;
                sup = sup.max(gap);
            }
            for b in block_means.iter_mut() {
                *b /= width as f64;
            }
            out.push((block_means, sup));
        }
        Ok(out)
    })?;
    let n = per_path.len();
    let mut rows = Vec::new();
    let mut pathwise = Vec::new();
    for (j, &delta) in deltas.iter().enumerate() {
        let mut best = (f64::NEG_INFINITY, 0.0);
        for b in 0..blocks {
            let (mean, se) = mean_and_stderr(per_path.iter().map(|v| v[j].0[b]), n);
            if mean > best.0 {
                best = (mean, se);
            }
        }
        rows.push(ConvergenceRow {
            delta,
            mean_sup_err_p: best.0,
            lp_err: best.0.powf(1.0 / p),
            std_error: best.1,
            n_paths: n,
        });
        let (mean, se) = mean_and_stderr(per_path.iter().map(|v| v[j].1), n);
        pathwise.push(ConvergenceRow {
            delta,
            mean_sup_err_p: mean,
            lp_err: mean.powf(1.0 / p),
            std_error: se,
            n_paths: n,
        });
    }
    let mut report = ConvergenceReport {
        kind: StudyKind::YbarGap,
        problem: spec.name.clone(),
        theta: params.theta,
        p,
        rows,
        fit: None,
        raw_fit: None,
        delta_ref: finest,
        master_seed: params.master_seed,
        pathwise_rows: Some(pathwise),
    };
    report.fill_fits();
    Ok(report)
}

/// Pathwise proxy for almost sure convergence of order `alpha`: the ratios
/// `max_k |y_k - x(t_k)| / Δ^alpha` per path, flagged `fail` when their
/// maximum over paths grows under refinement.
///
/// `alpha` must be below 1/2 (Brownian) or `1/(2p)` with `params.p` (jumps).
pub fn as_convergence_check(
    spec: &EquationSpec,
    params: &StudyParams,
    alpha: f64,
) -> Result<AsReport, HarnessError> {
    let setup = coupled_setup(spec, params)?;
    let bound = match setup.kind {
        DriverKind::Brownian => 0.5,
        DriverKind::Jump => 1.0 / (2.0 * params.p),
    };
    if !(alpha >= 0.0 && alpha < bound) {
        return Err(HarnessError::InvalidStudy(format!(
            "alpha = {alpha} must lie in [0, {bound}) for the {} driver",
            setup.kind
        )));
    }
    let sups = sup_errors(spec, params, &setup)?;
    let scale: Vec<f64> = setup.deltas.iter().map(|d| d.powf(alpha)).collect();
    let ratios: Vec<Vec<f64>> = sups
        .iter()
        .map(|v| v.iter().zip(&scale).map(|(e, s)| e / s).collect())
        .collect();
    let n = ratios.len();
    let rows: Vec<AsRow> = setup
        .deltas
        .iter()
        .enumerate()
        .map(|(j, &delta)| {
            let max_ratio = ratios.iter().map(|r| r[j]).fold(0.0f64, f64::max);
            let (mean_ratio, _) = mean_and_stderr(ratios.iter().map(|r| r[j]), n);
            AsRow { delta, max_ratio, mean_ratio, n_paths: n }
        })
        .collect();
    let maxima: Vec<f64> = rows.iter().map(|r| r.max_ratio).collect();
    let fail = grows_unboundedly(&maxima) || maxima.iter().any(|m| !m.is_finite());
    Ok(AsReport {
        problem: spec.name.clone(),
        theta: params.theta,
        alpha,
        rows,
        ratios,
        fail,
        delta_ref: params.delta_ref,
        master_seed: params.master_seed,
    })
}
