//! Command-line front end.
//!
//! # Configuration format
//!
//! A configuration file is flat `key = value` text, one entry per line. `#`
//! starts a comment. List-valued keys are given by repeating the key.
//! `--set key=value` overrides replace every occurrence of `key` in the file
//! (repeat `--set` for lists). `--output-dir`/`NSDDE_OUTPUT_DIR` and
//! `--workers`/`NSDDE_WORKERS` take precedence over the file.
//!
//! | key | meaning | default |
//! |-----|---------|---------|
//! | `problem` | builtin name or `inline` | required |
//! | `theta` | implicitness θ | `0.5` |
//! | `p` | error moment order | `2` |
//! | `delta` (repeated) | step sizes | `τ·2^-4 .. τ·2^-8` |
//! | `delta_ref` | reference step | `τ·2^-12` |
//! | `reference` | `scheme` or `closed-form` | `scheme` |
//! | `n_paths`, `master_seed`, `workers` | Monte Carlo setup | `1000`, `20240601`, `1` |
//! | `output_dir` | output directory | `out` |
//! | `alpha` | a.s. exponent (`almost-sure`) | `0.4` |
//! | `moment_p` (repeated) | moment orders (`moments`) | `2`, `4` |
//! | `expect_min`, `expect_max` | PASS window for the fitted slope | per study |
//! | `path_index`, `split_step` | path selection for `simulate` | `0`, `false` |
//! | `allow_low_theta`, `solver_tol`, `solver_max_iter` | scheme knobs | `false`, `1e-12`, `200` |
//! | `param.xi`, `param.mu`, `param.sigma`, `param.a`, `param.x0` | builtin parameters | |
//! | `param.mark` (repeated) | builtin jump atoms `u : w` | |
//!
//! Numbers may be written as fractions, e.g. `delta = 1/64`.
//!
//! An inline problem (`problem = inline`) is defined by polynomial term
//! lists (see [`crate::poly`]); each occurrence of a coefficient key adds
//! terms, and `;` separates several terms on one line:
//!
//! ```text
//! problem = inline
//! dim_state = 1
//! dim_noise = 1
//! delay = 0.5
//! horizon = 1
//! neutral[0] = -1 * y0^3
//! drift[0] = x0 ; -1 * x0^3 ; y0^3
//! diffusion[0,0] = x0 ; y0^4        # or jump[0] = x0*u0 ; y0^2*u0
//! mark = 0.2 : 1.0                  # jump driver: `u_1,..,u_q : weight`
//! initial[0] = 0.2
//! k1 = 1
//! k2 = 1
//! k2_bar = 1
//! r = 1
//! l1 = 1, 2                         # envelope (L_i, l_i)
//! l2 = 1, 3
//! l3 = 1, 2
//! linear_growth = 1                 # optional K̄ for θ < 1/2
//! ```

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Parser, ValueEnum};
use thiserror::Error;

use crate::drivers;
use crate::harness::{
    self, AsReport, ConvergenceReport, HarnessError, MomentReport, Reference, StudyKind,
    StudyParams,
};
use crate::model::{
    self, AssumptionConstants, BuiltinParams, DriverKind, Envelope, EquationSpec, InitialPath,
    JumpPart, MarkMeasure,
};
use crate::poly::{Monomial, PolyMap, Var};
use crate::scheme::{SchemeError, Simulator};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Subcommand {
    /// One path, written to path.csv
    Simulate,
    /// Strong error study
    Converge,
    /// Strong error study for a jump-driven problem (raw-moment slope)
    ConvergeJump,
    /// Moment bounds
    Moments,
    /// Pathwise (almost sure) order proxy
    AlmostSure,
    /// One-step gap between the step interpolant and the scheme
    Gap,
    /// Sampled assumption checks
    Validate,
}

#[derive(Debug, Parser)]
#[command(name = "nsdde", version, about = "θ-EM integrators for neutral stochastic delay equations")]
pub struct Args {
    #[arg(value_enum)]
    pub subcommand: Subcommand,
    /// Configuration file (flat key = value)
    #[arg(short, long)]
    pub config: Option<PathBuf>,
    /// Override a configuration key; repeat for list keys
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long, env = "NSDDE_OUTPUT_DIR")]
    pub output_dir: Option<PathBuf>,
    #[arg(long, env = "NSDDE_WORKERS")]
    pub workers: Option<usize>,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("key `{key}`: {message}")]
    Key { key: String, message: String },
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Harness(#[from] HarnessError),
    #[error(transparent)]
    Scheme(#[from] SchemeError),
    #[error(transparent)]
    Model(#[from] model::ModelError),
}

impl CliError {
    fn key(key: &str, message: impl Into<String>) -> Self {
        CliError::Key { key: key.to_string(), message: message.into() }
    }

    fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io { path: path.to_path_buf(), source }
    }
}

/// Overrides applied on top of a configuration file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub set: Vec<(String, String)>,
    pub output_dir: Option<PathBuf>,
    pub workers: Option<usize>,
}

/// Parsed `key = value` entries in file order.
#[derive(Debug, Clone, Default)]
pub struct RawConfig {
    entries: Vec<(String, String, usize)>,
}

impl RawConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = match line.find('#') {
                Some(pos) => &line[..pos],
                None => line,
            };
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| CliError::Syntax {
                line: i + 1,
                message: format!("expected `key = value`, got `{line}`"),
            })?;
            let key = key.trim();
            if key.is_empty() {
                return Err(CliError::Syntax { line: i + 1, message: "empty key".into() });
            }
            let value = value.trim().trim_matches('"').to_string();
            entries.push((key.to_string(), value, i + 1));
        }
        Ok(RawConfig { entries })
    }

    /// Replaces every entry of each overridden key.
    pub fn apply(&mut self, overrides: &[(String, String)]) {
        let keys: Vec<&str> = overrides.iter().map(|(k, _)| k.as_str()).collect();
        self.entries.retain(|(k, _, _)| !keys.contains(&k.as_str()));
        for (k, v) in overrides {
            self.entries.push((k.clone(), v.clone(), 0));
        }
    }

    fn all(&self, key: &str) -> Vec<&str> {
        self.entries.iter().filter(|e| e.0 == key).map(|e| e.1.as_str()).collect()
    }

    fn one(&self, key: &str) -> Result<Option<&str>, CliError> {
        let v = self.all(key);
        match v.len() {
            0 => Ok(None),
            1 => Ok(Some(v[0])),
            _ => Err(CliError::key(key, "given more than once")),
        }
    }

    fn number(&self, key: &str) -> Result<Option<f64>, CliError> {
        self.one(key)?.map(|v| parse_number(key, v)).transpose()
    }

    fn numbers(&self, key: &str) -> Result<Vec<f64>, CliError> {
        self.all(key).into_iter().map(|v| parse_number(key, v)).collect()
    }

    fn integer<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>, CliError> {
        self.one(key)?
            .map(|v| v.parse::<T>().map_err(|_| CliError::key(key, format!("`{v}` is not an integer"))))
            .transpose()
    }

    fn boolean(&self, key: &str) -> Result<Option<bool>, CliError> {
        self.one(key)?
            .map(|v| match v {
                "true" | "yes" | "1" => Ok(true),
                "false" | "no" | "0" => Ok(false),
                _ => Err(CliError::key(key, format!("`{v}` is not a boolean"))),
            })
            .transpose()
    }
}

fn parse_number(key: &str, v: &str) -> Result<f64, CliError> {
    let bad = || CliError::key(key, format!("`{v}` is not a number"));
    let x = match v.split_once('/') {
        Some((a, b)) => {
            let a: f64 = a.trim().parse().map_err(|_| bad())?;
            let b: f64 = b.trim().parse().map_err(|_| bad())?;
            a / b
        }
        None => v.parse().map_err(|_| bad())?,
    };
    if x.is_finite() {
        Ok(x)
    } else {
        Err(bad())
    }
}

const STUDY_KEYS: [&str; 19] = [
    "problem",
    "theta",
    "p",
    "delta",
    "delta_ref",
    "reference",
    "n_paths",
    "master_seed",
    "output_dir",
    "workers",
    "alpha",
    "moment_p",
    "expect_min",
    "expect_max",
    "path_index",
    "split_step",
    "allow_low_theta",
    "solver_tol",
    "solver_max_iter",
];

const INLINE_KEYS: [&str; 18] = [
    "name",
    "dim_state",
    "dim_noise",
    "delay",
    "horizon",
    "neutral",
    "drift",
    "diffusion",
    "jump",
    "mark",
    "initial",
    "k1",
    "k2",
    "k2_bar",
    "r",
    "l1",
    "l2",
    "l3",
];

const PARAM_KEYS: [&str; 6] = ["xi", "mu", "sigma", "a", "x0", "mark"];

fn check_keys(raw: &RawConfig, inline: bool) -> Result<(), CliError> {
    for (key, _, line) in &raw.entries {
        let base = key.split('[').next().unwrap_or(key);
        let known = STUDY_KEYS.contains(&key.as_str())
            || key.strip_prefix("param.").is_some_and(|p| PARAM_KEYS.contains(&p))
            || (inline && (INLINE_KEYS.contains(&base) || key == "linear_growth"));
        if !known {
            let at = if *line > 0 { format!(" (line {line})") } else { String::new() };
            return Err(CliError::key(key, format!("unknown key{at}")));
        }
    }
    Ok(())
}

/// Everything a subcommand needs, validated.
#[derive(Debug, Clone)]
pub struct StudyConfig {
    pub spec: EquationSpec,
    pub driver: DriverKind,
    pub params: StudyParams,
    pub output_dir: PathBuf,
    pub alpha: f64,
    pub moment_p: Vec<f64>,
    pub expect_min: Option<f64>,
    pub expect_max: Option<f64>,
    pub path_index: u64,
    pub split_step: bool,
}

impl StudyConfig {
    pub fn load(raw: &RawConfig, overrides: &Overrides) -> Result<Self, CliError> {
        let problem = raw.one("problem")?.ok_or_else(|| CliError::key("problem", "missing"))?;
        let inline = problem == "inline";
        check_keys(raw, inline)?;
        let mut spec = if inline { inline_problem(raw)? } else { builtin(raw, problem)? };
        if let Some(k_bar) = raw.number("linear_growth")? {
            spec.constants.linear_growth = Some(k_bar);
        }
        let driver = spec.check_structure()?;
        let theta = raw.number("theta")?.unwrap_or(0.5);
        let mut params = StudyParams::new(&spec, theta);
        if let Some(p) = raw.number("p")? {
            params.p = p;
        }
        let deltas = raw.numbers("delta")?;
        if !deltas.is_empty() {
            params.deltas = deltas;
        }
        if let Some(d) = raw.number("delta_ref")? {
            params.delta_ref = d;
        }
        params.reference = match raw.one("reference")? {
            None | Some("scheme") => Reference::Scheme,
            Some("closed-form") => Reference::ClosedForm,
            Some(other) => {
                return Err(CliError::key(
                    "reference",
                    format!("`{other}` (expected `scheme` or `closed-form`)"),
                ))
            }
        };
        if let Some(n) = raw.integer("n_paths")? {
            params.n_paths = n;
        }
        if let Some(s) = raw.integer("master_seed")? {
            params.master_seed = s;
        }
        params.workers = match overrides.workers {
            Some(w) => w,
            None => raw.integer("workers")?.unwrap_or(1),
        };
        if params.workers == 0 {
            return Err(CliError::key("workers", "must be at least 1"));
        }
        if let Some(t) = raw.number("solver_tol")? {
            if !(t > 0.0) {
                return Err(CliError::key("solver_tol", "must be positive"));
            }
            params.solver_tol = t;
        }
        if let Some(i) = raw.integer("solver_max_iter")? {
            if i == 0 {
                return Err(CliError::key("solver_max_iter", "must be positive"));
            }
            params.solver_max_iter = i;
        }
        params.allow_low_theta = raw.boolean("allow_low_theta")?.unwrap_or(false);
        let output_dir = match &overrides.output_dir {
            Some(d) => d.clone(),
            None => PathBuf::from(raw.one("output_dir")?.unwrap_or("out")),
        };
        let mut moment_p = raw.numbers("moment_p")?;
        if moment_p.is_empty() {
            moment_p = vec![2.0, 4.0];
        }
        Ok(StudyConfig {
            spec,
            driver,
            params,
            output_dir,
            alpha: raw.number("alpha")?.unwrap_or(0.4),
            moment_p,
            expect_min: raw.number("expect_min")?,
            expect_max: raw.number("expect_max")?,
            path_index: raw.integer("path_index")?.unwrap_or(0),
            split_step: raw.boolean("split_step")?.unwrap_or(false),
        })
    }

    /// Re-checks every scheme invariant that the subcommand depends on.
    fn validate_for(&self, sub: Subcommand) -> Result<(), CliError> {
        let scheme_err = |key: &str, e: SchemeError| CliError::key(key, e.to_string());
        if sub == Subcommand::Validate {
            return Ok(());
        }
        let deltas: &[f64] = if sub == Subcommand::Simulate {
            &self.params.deltas[..1]
        } else {
            &self.params.deltas
        };
        for &d in deltas {
            self.params.scheme(d).validate(&self.spec).map_err(|e| scheme_err("delta", e))?;
        }
        let uses_ref = matches!(
            sub,
            Subcommand::Converge | Subcommand::ConvergeJump | Subcommand::AlmostSure
        );
        if uses_ref && self.params.reference == Reference::Scheme {
            self.params
                .scheme(self.params.delta_ref)
                .validate(&self.spec)
                .map_err(|e| scheme_err("delta_ref", e))?;
        }
        Ok(())
    }
}

fn builtin(raw: &RawConfig, name: &str) -> Result<EquationSpec, CliError> {
    let mut bp = BuiltinParams::default();
    for (key, slot) in [
        ("param.xi", &mut bp.xi),
        ("param.mu", &mut bp.mu),
        ("param.sigma", &mut bp.sigma),
        ("param.a", &mut bp.a),
        ("param.x0", &mut bp.x0),
    ] {
        if let Some(v) = raw.number(key)? {
            *slot = v;
        }
    }
    let marks = raw.all("param.mark");
    if !marks.is_empty() {
        bp.marks = marks
            .into_iter()
            .map(|m| {
                let (u, w) = parse_mark("param.mark", m)?;
                if u.len() != 1 {
                    return Err(CliError::key("param.mark", "builtin marks are scalar"));
                }
                Ok((u[0], w))
            })
            .collect::<Result<_, _>>()?;
    }
    model::builtin_problem_with(name, &bp).map_err(|e| CliError::key("problem", e.to_string()))
}

fn parse_mark(key: &str, v: &str) -> Result<(Vec<f64>, f64), CliError> {
    let (u, w) = v
        .split_once(':')
        .ok_or_else(|| CliError::key(key, format!("`{v}` (expected `u_1,..,u_q : weight`)")))?;
    let u = u.split(',').map(|x| parse_number(key, x.trim())).collect::<Result<Vec<_>, _>>()?;
    Ok((u, parse_number(key, w.trim())?))
}

/// `name[i]` or `name[i,j]` → indices.
fn indices(key: &str) -> Option<(&str, Vec<usize>)> {
    let (base, rest) = key.split_once('[')?;
    let inner = rest.strip_suffix(']')?;
    let idx = inner.split(',').map(|s| s.trim().parse().ok()).collect::<Option<Vec<usize>>>()?;
    Some((base, idx))
}

fn inline_problem(raw: &RawConfig) -> Result<EquationSpec, CliError> {
    let need = |key: &str| -> Result<f64, CliError> {
        raw.number(key)?.ok_or_else(|| CliError::key(key, "missing (required for inline problems)"))
    };
    let n: usize = raw.integer("dim_state")?.ok_or_else(|| CliError::key("dim_state", "missing"))?;
    if n == 0 {
        return Err(CliError::key("dim_state", "must be positive"));
    }
    let marks = raw.all("mark");
    let is_jump = !marks.is_empty();
    let d: usize = if is_jump { raw.integer("dim_noise")?.unwrap_or(1) } else {
        raw.integer("dim_noise")?.ok_or_else(|| CliError::key("dim_noise", "missing"))?
    };
    if d == 0 {
        return Err(CliError::key("dim_noise", "must be positive"));
    }
    let delay = need("delay")?;
    let horizon = need("horizon")?;

    let mut neutral = PolyMap::zeros(n);
    let mut drift = PolyMap::zeros(n);
    let mut diffusion = PolyMap::zeros(n * d);
    let mut jump = PolyMap::zeros(n);
    let mut initial = vec![0.0; n];
    let mut has_diffusion = false;
    let mut has_jump = false;
    for (key, value, _) in &raw.entries {
        let Some((base, idx)) = indices(key) else { continue };
        let bad_index = || CliError::key(key, "index out of range");
        let target = match (base, idx.as_slice()) {
            ("neutral", [i]) if *i < n => &mut neutral.components[*i],
            ("drift", [i]) if *i < n => &mut drift.components[*i],
            ("diffusion", [i, j]) if *i < n && *j < d => {
                has_diffusion = true;
                &mut diffusion.components[i * d + j]
            }
            ("jump", [i]) if *i < n => {
                has_jump = true;
                &mut jump.components[*i]
            }
            ("initial", [i]) if *i < n => {
                initial[*i] = parse_number(key, value)?;
                continue;
            }
            ("neutral" | "drift" | "diffusion" | "jump" | "initial", _) => return Err(bad_index()),
            _ => return Err(CliError::key(key, "unknown key")),
        };
        for term in value.split(';') {
            let m: Monomial = term.parse().map_err(|e| CliError::key(key, format!("{e}")))?;
            target.push(m);
        }
    }
    if is_jump != has_jump {
        return Err(CliError::key(
            "mark",
            "a jump coefficient needs at least one `mark` and vice versa",
        ));
    }
    if has_jump && has_diffusion {
        return Err(CliError::key("diffusion", "both a diffusion and a jump coefficient given"));
    }
    for (name, map, allowed) in [
        ("neutral", &neutral, [false, true, false]),
        ("drift", &drift, [true, true, false]),
        ("diffusion", &diffusion, [true, true, false]),
        ("jump", &jump, [true, true, true]),
    ] {
        for (var, ok, limit) in [(Var::X, allowed[0], n), (Var::Y, allowed[1], n), (Var::U, allowed[2], usize::MAX)] {
            let arity = map.arity(var);
            if arity > 0 && !ok {
                return Err(CliError::key(name, format!("may not depend on {var:?}").to_lowercase()));
            }
            if arity > limit {
                return Err(CliError::key(name, "variable index exceeds dim_state"));
            }
        }
    }

    let envelope = |key: &str| -> Result<Envelope, CliError> {
        let v = raw.one(key)?.ok_or_else(|| CliError::key(key, "missing (expected `L, l`)"))?;
        let (a, b) = v.split_once(',').ok_or_else(|| CliError::key(key, "expected `L, l`"))?;
        Ok(Envelope::new(parse_number(key, a.trim())?, parse_number(key, b.trim())?))
    };
    let constants = AssumptionConstants::new(
        need("k1")?,
        need("k2")?,
        raw.number("k2_bar")?.unwrap_or(1.0),
        raw.number("r")?.unwrap_or(1.0),
        [envelope("l1")?, envelope("l2")?, envelope("l3")?],
    )
    .map_err(|e| CliError::key("k1", e.to_string()))?;

    let jump_part = if is_jump {
        let atoms = marks.iter().map(|m| parse_mark("mark", m)).collect::<Result<Vec<_>, _>>()?;
        let measure = MarkMeasure::new(atoms).map_err(|e| CliError::key("mark", e.to_string()))?;
        if jump.arity(Var::U) > measure.dim_mark() {
            return Err(CliError::key("jump", "mark index exceeds the mark dimension"));
        }
        let jump = Arc::new(jump);
        Some(JumpPart {
            coeff: Arc::new(move |x: &[f64], y: &[f64], u: &[f64], out: &mut [f64]| {
                jump.eval_into(x, y, u, out)
            }),
            measure,
        })
    } else {
        None
    };
    let neutral = Arc::new(neutral);
    let drift = Arc::new(drift);
    let diffusion = Arc::new(diffusion);
    let mut spec = EquationSpec {
        name: raw.one("name")?.unwrap_or("inline").to_string(),
        dim_state: n,
        dim_noise: d,
        delay,
        horizon,
        neutral: Arc::new(move |y: &[f64], out: &mut [f64]| neutral.eval_into(&[], y, &[], out)),
        drift: Arc::new(move |x: &[f64], y: &[f64], out: &mut [f64]| drift.eval_into(x, y, &[], out)),
        diffusion: (!is_jump).then(|| -> model::DiffusionFn {
            Arc::new(move |x: &[f64], y: &[f64], out: &mut [f64]| diffusion.eval_into(x, y, &[], out))
        }),
        jump: jump_part,
        initial: InitialPath::constant(initial),
        constants,
        exact: None,
    };
    spec.calibrate_constants();
    Ok(spec)
}

/// A PASS/FAIL line of a summary.
#[derive(Debug, Clone, PartialEq)]
pub struct Flag {
    pub label: String,
    pub pass: bool,
}

impl Flag {
    fn line(&self) -> String {
        format!("{} {}", if self.pass { "PASS" } else { "FAIL" }, self.label)
    }
}

fn write_file(dir: &Path, name: &str, contents: &str) -> Result<PathBuf, CliError> {
    let path = dir.join(name);
    let mut f = fs::File::create(&path).map_err(|e| CliError::io(&path, e))?;
    f.write_all(contents.as_bytes()).map_err(|e| CliError::io(&path, e))?;
    Ok(path)
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn study_name(kind: StudyKind) -> &'static str {
    match kind {
        StudyKind::Strong => "strong error",
        StudyKind::JumpLp => "jump strong error",
        StudyKind::YbarGap => "one-step gap",
    }
}

fn fit_text(fit: Option<harness::Fit>) -> String {
    match fit {
        Some(f) => format!("{:.2} ± {:.2}", f.slope, f.stderr),
        None => "n/a".into(),
    }
}

/// `convergence.csv`, `summary.txt` and `plotdata.csv`.
pub fn emit_report(
    report: &ConvergenceReport,
    flags: &[Flag],
    output_dir: &Path,
) -> Result<Vec<PathBuf>, CliError> {
    ensure_dir(output_dir)?;
    let mut csv = String::from("delta,p,theta,mean_sup_err_p,lp_err,std_error,n_paths\n");
    let mut plot = String::from("log2_delta,log2_lp_err\n");
    for r in &report.rows {
        writeln!(
            csv,
            "{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{}",
            r.delta, report.p, report.theta, r.mean_sup_err_p, r.lp_err, r.std_error, r.n_paths
        )
        .unwrap();
        writeln!(plot, "{:.16e},{:.16e}", r.delta.log2(), r.lp_err.log2()).unwrap();
    }
    let mut summary = String::new();
    writeln!(summary, "problem {}", report.problem).unwrap();
    writeln!(summary, "study {}", study_name(report.kind)).unwrap();
    writeln!(summary, "theta {}", report.theta).unwrap();
    writeln!(summary, "p {}", report.p).unwrap();
    if let Some(r) = report.rows.first() {
        writeln!(summary, "n_paths {}", r.n_paths).unwrap();
    }
    writeln!(summary, "delta_ref {:e}", report.delta_ref).unwrap();
    writeln!(summary, "master_seed {}", report.master_seed).unwrap();
    writeln!(summary, "order {}", fit_text(report.fit)).unwrap();
    writeln!(summary, "raw-moment slope {}", fit_text(report.raw_fit)).unwrap();
    if report.pathwise_rows.is_some() {
        writeln!(summary, "pathwise raw-moment slope {}", fit_text(report.pathwise_fit())).unwrap();
    }
    for f in flags {
        writeln!(summary, "{}", f.line()).unwrap();
    }
    Ok(vec![
        write_file(output_dir, "convergence.csv", &csv)?,
        write_file(output_dir, "summary.txt", &summary)?,
        write_file(output_dir, "plotdata.csv", &plot)?,
    ])
}

/// `moments.csv` and `summary.txt`.
pub fn emit_moments(
    report: &MomentReport,
    flags: &[Flag],
    output_dir: &Path,
) -> Result<Vec<PathBuf>, CliError> {
    ensure_dir(output_dir)?;
    let mut csv = String::from("delta,p,theta,estimate,std_error,n_paths\n");
    for r in &report.rows {
        writeln!(
            csv,
            "{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{}",
            r.delta, r.p, report.theta, r.estimate, r.std_error, r.n_paths
        )
        .unwrap();
    }
    let mut summary = String::new();
    writeln!(summary, "problem {}", report.problem).unwrap();
    writeln!(summary, "study moments").unwrap();
    writeln!(summary, "theta {}", report.theta).unwrap();
    writeln!(summary, "master_seed {}", report.master_seed).unwrap();
    for &(p, violation) in &report.flags {
        writeln!(summary, "p {p}: {}", if violation { "VIOLATION" } else { "bounded" }).unwrap();
    }
    for f in flags {
        writeln!(summary, "{}", f.line()).unwrap();
    }
    Ok(vec![
        write_file(output_dir, "moments.csv", &csv)?,
        write_file(output_dir, "summary.txt", &summary)?,
    ])
}

/// `almost_sure.csv`, `almost_sure_paths.csv` and `summary.txt`.
pub fn emit_almost_sure(
    report: &AsReport,
    flags: &[Flag],
    output_dir: &Path,
) -> Result<Vec<PathBuf>, CliError> {
    ensure_dir(output_dir)?;
    let mut csv = String::from("delta,alpha,theta,max_ratio,mean_ratio,n_paths\n");
    for r in &report.rows {
        writeln!(
            csv,
            "{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{}",
            r.delta, report.alpha, report.theta, r.max_ratio, r.mean_ratio, r.n_paths
        )
        .unwrap();
    }
    let mut paths = String::from("path_index,delta,ratio\n");
    for (i, ratios) in report.ratios.iter().enumerate() {
        for (r, row) in ratios.iter().zip(&report.rows) {
            writeln!(paths, "{i},{:.16e},{:.16e}", row.delta, r).unwrap();
        }
    }
    let mut summary = String::new();
    writeln!(summary, "problem {}", report.problem).unwrap();
    writeln!(summary, "study almost-sure").unwrap();
    writeln!(summary, "theta {}", report.theta).unwrap();
    writeln!(summary, "alpha {}", report.alpha).unwrap();
    writeln!(summary, "delta_ref {:e}", report.delta_ref).unwrap();
    writeln!(summary, "master_seed {}", report.master_seed).unwrap();
    for f in flags {
        writeln!(summary, "{}", f.line()).unwrap();
    }
    Ok(vec![
        write_file(output_dir, "almost_sure.csv", &csv)?,
        write_file(output_dir, "almost_sure_paths.csv", &paths)?,
        write_file(output_dir, "summary.txt", &summary)?,
    ])
}

fn window_flag(what: &str, slope: Option<harness::Fit>, lo: Option<f64>, hi: Option<f64>) -> Flag {
    let range = match (lo, hi) {
        (Some(a), Some(b)) => format!("in [{a}, {b}]"),
        (Some(a), None) => format!(">= {a}"),
        (None, Some(b)) => format!("<= {b}"),
        (None, None) => "available".into(),
    };
    let pass = match slope {
        Some(f) => lo.is_none_or(|a| f.slope >= a) && hi.is_none_or(|b| f.slope <= b),
        None => false,
    };
    Flag { label: format!("{what} {} {range}", fit_text(slope)), pass }
}

/// Outcome of a subcommand: files written and PASS/FAIL flags.
#[derive(Debug, Clone, Default)]
pub struct Outcome {
    pub files: Vec<PathBuf>,
    pub flags: Vec<Flag>,
}

impl Outcome {
    pub fn all_pass(&self) -> bool {
        self.flags.iter().all(|f| f.pass)
    }
}

/// Runs a subcommand against a loaded configuration.
pub fn execute(sub: Subcommand, cfg: &StudyConfig) -> Result<Outcome, CliError> {
    cfg.validate_for(sub)?;
    let dir = &cfg.output_dir;
    let spec = &cfg.spec;
    let params = &cfg.params;
    match sub {
        Subcommand::Validate => {
            let report = model::validate_spec(spec)?;
            ensure_dir(dir)?;
            let file = write_file(dir, "validation.txt", &report.to_string())?;
            let flags = vec![Flag { label: "assumption checks".into(), pass: report.all_pass() }];
            Ok(Outcome { files: vec![file], flags })
        }
        Subcommand::Simulate => {
            let config = params.scheme(params.deltas[0]);
            let grid = config.validate(spec)?;
            let noise = match cfg.driver {
                DriverKind::Brownian => drivers::brownian_realization(
                    params.master_seed,
                    cfg.path_index,
                    config.delta,
                    grid.steps,
                    spec.dim_noise,
                ),
                DriverKind::Jump => drivers::jump_realization(
                    params.master_seed,
                    cfg.path_index,
                    config.delta,
                    grid.steps,
                    &spec.jump.as_ref().expect("jump driver").measure,
                ),
            }
            .map_err(HarnessError::from)?;
            let mut sim = Simulator::with_grid(spec, &config, grid);
            let path = if cfg.split_step { sim.simulate_split(&noise)? } else { sim.simulate(&noise)? };
            ensure_dir(dir)?;
            let file = dir.join("path.csv");
            let mut buf = Vec::new();
            path.write_csv(&mut buf).map_err(|e| CliError::io(&file, e))?;
            fs::write(&file, buf).map_err(|e| CliError::io(&file, e))?;
            Ok(Outcome { files: vec![file], flags: vec![] })
        }
        Subcommand::Converge => {
            let report = harness::strong_error_study(spec, params)?;
            let (lo, hi) = (cfg.expect_min.or(Some(0.35)), cfg.expect_max.or(Some(0.65)));
            let flags = vec![window_flag("order", report.fit, lo, hi)];
            let files = emit_report(&report, &flags, dir)?;
            Ok(Outcome { files, flags })
        }
        Subcommand::ConvergeJump => {
            let report = harness::lp_error_exponent_jump(spec, params)?;
            let flags =
                vec![window_flag("raw-moment slope", report.raw_fit, cfg.expect_min.or(Some(0.35)), cfg.expect_max)];
            let files = emit_report(&report, &flags, dir)?;
            Ok(Outcome { files, flags })
        }
        Subcommand::Gap => {
            let report = harness::ybar_gap_study(spec, params)?;
            let (centre, half) = match cfg.driver {
                DriverKind::Brownian => (params.p / 2.0, 0.15),
                DriverKind::Jump => (1.0, 0.3),
            };
            let lo = cfg.expect_min.or(Some(centre - half));
            let hi = cfg.expect_max.or(Some(centre + half));
            let flags = vec![window_flag("raw-moment slope", report.raw_fit, lo, hi)];
            let files = emit_report(&report, &flags, dir)?;
            Ok(Outcome { files, flags })
        }
        Subcommand::Moments => {
            let report = harness::moment_study(spec, params, &cfg.moment_p)?;
            let flags = report
                .flags
                .iter()
                .map(|&(p, v)| Flag { label: format!("moment p={p} bounded"), pass: !v })
                .collect::<Vec<_>>();
            let files = emit_moments(&report, &flags, dir)?;
            Ok(Outcome { files, flags })
        }
        Subcommand::AlmostSure => {
            let report = harness::as_convergence_check(spec, params, cfg.alpha)?;
            let flags = vec![Flag {
                label: format!("pathwise ratio at alpha={} bounded", cfg.alpha),
                pass: !report.fail,
            }];
            let files = emit_almost_sure(&report, &flags, dir)?;
            Ok(Outcome { files, flags })
        }
    }
}

fn load(config: Option<&Path>, overrides: &Overrides) -> Result<StudyConfig, CliError> {
    let mut raw = match config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
            RawConfig::parse(&text)?
        }
        None => RawConfig::default(),
    };
    raw.apply(&overrides.set);
    StudyConfig::load(&raw, overrides)
}

/// Runs a subcommand and maps the outcome to an exit code: 0 when every
/// flag passes, 1 on a FAIL flag, 2 on configuration or scheme errors.
pub fn run(sub: Subcommand, config: Option<&Path>, overrides: &Overrides) -> i32 {
    let result = load(config, overrides).and_then(|cfg| execute(sub, &cfg));
    match result {
        Ok(outcome) => {
            for f in &outcome.flags {
                println!("{}", f.line());
            }
            for file in &outcome.files {
                println!("wrote {}", file.display());
            }
            if outcome.all_pass() {
                0
            } else {
                1
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

/// Entry point for the binary.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let args = match Args::try_parse_from(args) {
        Ok(a) => a,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    let mut set = Vec::new();
    for s in &args.set {
        match s.split_once('=') {
            Some((k, v)) => set.push((k.trim().to_string(), v.trim().to_string())),
            None => {
                eprintln!("error: --set expects KEY=VALUE, got `{s}`");
                return 2;
            }
        }
    }
    let overrides = Overrides { set, output_dir: args.output_dir, workers: args.workers };
    run(args.subcommand, args.config.as_deref(), &overrides)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(text: &str) -> Result<StudyConfig, CliError> {
        StudyConfig::load(&RawConfig::parse(text).unwrap(), &Overrides::default())
    }

    #[test]
    fn parses_flat_config() {
        let raw = RawConfig::parse("# c\nproblem = cubic-neutral\n delta = 1/32 # x\ndelta=1/64\n\n").unwrap();
        assert_eq!(raw.numbers("delta").unwrap(), vec![1.0 / 32.0, 1.0 / 64.0]);
        assert!(RawConfig::parse("novalue").is_err());
        let c = cfg("problem = cubic-neutral\ntheta = 1\ndelta = 1/32\n").unwrap();
        assert_eq!(c.params.deltas, vec![1.0 / 32.0]);
        assert_eq!(c.params.theta, 1.0);
        assert_eq!(c.params.n_paths, 1000);
    }

    #[test]
    fn overrides_replace_lists() {
        let mut raw = RawConfig::parse("problem = gbm-nodelay\ndelta = 0.1\ndelta = 0.05\n").unwrap();
        raw.apply(&[("delta".into(), "0.25".into())]);
        assert_eq!(raw.numbers("delta").unwrap(), vec![0.25]);
    }

    #[test]
    fn rejects_unknown_and_malformed_keys() {
        assert!(matches!(cfg("problem = cubic-neutral\nthetta = 1\n"), Err(CliError::Key { key, .. }) if key == "thetta"));
        assert!(matches!(cfg("problem = nope\n"), Err(CliError::Key { key, .. }) if key == "problem"));
        assert!(matches!(cfg("problem = cubic-neutral\ntheta = x\n"), Err(CliError::Key { key, .. }) if key == "theta"));
        assert!(matches!(cfg("theta = 1\n"), Err(CliError::Key { key, .. }) if key == "problem"));
    }

    #[test]
    fn step_bound_names_key() {
        let c = cfg("problem = cubic-neutral\ntheta = 1\ndelta = 0.25\n").unwrap();
        let err = c.validate_for(Subcommand::Converge).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("`delta`") && msg.contains("step-size bound") && msg.contains("0.125"), "{msg}");
    }

    const INLINE: &str = "problem = inline
dim_state = 1
dim_noise = 1
delay = 0.5
horizon = 1
neutral[0] = -1 * y0^3
drift[0] = x0 ; -1 * x0^3 ; y0^3
diffusion[0,0] = x0 ; y0^4
initial[0] = 0.2
k1 = 1
k2 = 1
l1 = 1, 2
l2 = 1, 3
l3 = 1, 2
";

    #[test]
    fn inline_problem_matches_builtin() {
        let c = cfg(INLINE).unwrap();
        let b = model::builtin_problem("cubic-neutral").unwrap();
        assert_eq!(c.spec.constants, b.constants);
        let mut o1 = [0.0];
        let mut o2 = [0.0];
        for (x, y) in [(0.3, -1.2), (1.7, 0.4), (-2.0, 2.0)] {
            (c.spec.drift)(&[x], &[y], &mut o1);
            (b.drift)(&[x], &[y], &mut o2);
            assert!((o1[0] - o2[0]).abs() < 1e-14);
            (c.spec.diffusion.as_ref().unwrap())(&[x], &[y], &mut o1);
            (b.diffusion.as_ref().unwrap())(&[x], &[y], &mut o2);
            assert!((o1[0] - o2[0]).abs() < 1e-14);
            c.spec.eval_neutral(&[y], &mut o1);
            b.eval_neutral(&[y], &mut o2);
            assert!((o1[0] - o2[0]).abs() < 1e-14);
        }
        let report = model::validate_spec(&c.spec).unwrap();
        assert!(report.all_pass(), "{report}");
    }

    #[test]
    fn inline_jump_problem() {
        let text = INLINE.replace("diffusion[0,0] = x0 ; y0^4", "jump[0] = x0*u0 ; y0^2*u0\nmark = 0.2 : 1\nmark = 0.5 : 0.5");
        let c = cfg(&text).unwrap();
        assert_eq!(c.driver, DriverKind::Jump);
        assert_eq!(c.spec.jump.as_ref().unwrap().measure.total_mass(), 1.5);
        let bad = INLINE.replace("neutral[0] = -1 * y0^3", "neutral[0] = x0");
        assert!(matches!(cfg(&bad), Err(CliError::Key { key, .. }) if key == "neutral"));
        let bad = INLINE.replace("drift[0] = x0", "drift[3] = x0");
        assert!(cfg(&bad).is_err());
        let bad = format!("{INLINE}mark = 1 : 1\n");
        assert!(cfg(&bad).is_err());
    }

    #[test]
    fn summary_layout() {
        let report = ConvergenceReport {
            kind: StudyKind::Strong,
            problem: "x".into(),
            theta: 0.5,
            p: 2.0,
            rows: vec![
                harness::ConvergenceRow { delta: 0.1, mean_sup_err_p: 0.04, lp_err: 0.2, std_error: 0.01, n_paths: 10 },
                harness::ConvergenceRow { delta: 0.05, mean_sup_err_p: 0.02, lp_err: 0.1414, std_error: 0.01, n_paths: 10 },
            ],
            fit: Some(harness::Fit { slope: 0.5, stderr: 0.03 }),
            raw_fit: None,
            delta_ref: 0.01,
            master_seed: 1,
            pathwise_rows: None,
        };
        let dir = tempfile::tempdir().unwrap();
        let flags = vec![window_flag("order", report.fit, Some(0.35), Some(0.65))];
        emit_report(&report, &flags, dir.path()).unwrap();
        let csv = fs::read_to_string(dir.path().join("convergence.csv")).unwrap();
        assert_eq!(csv.lines().count(), 3);
        assert_eq!(csv.lines().next().unwrap(), "delta,p,theta,mean_sup_err_p,lp_err,std_error,n_paths");
        assert!(csv.lines().nth(1).unwrap().starts_with("1.0000000000000001e-1,2.0000000000000000e0,"));
        let summary = fs::read_to_string(dir.path().join("summary.txt")).unwrap();
        assert!(summary.contains("order 0.50 ± 0.03\n"), "{summary}");
        assert!(summary.contains("PASS order 0.50 ± 0.03 in [0.35, 0.65]"));
        let plot = fs::read_to_string(dir.path().join("plotdata.csv")).unwrap();
        assert_eq!(plot.lines().next().unwrap(), "log2_delta,log2_lp_err");
    }
}
