//! Reproducible noise realizations on a uniform grid.
//!
//! # Streams
//!
//! Every path owns one random stream, derived from `(master_seed, path_index)`
//! alone:
//!
//! ```text
//! path_seed = splitmix64(master_seed + splitmix64(path_index))       (wrapping)
//! key[i]    = splitmix64^(i+1)(path_seed), i = 0..4                 (4 × u64, little endian)
//! stream    = ChaCha8(key), stream id 0 = Brownian, 1 = jumps, 2 = initial data
//! ```
//!
//! ChaCha8 is a counter-based generator, so a stream does not depend on
//! thread count or on the order in which paths are produced.
//!
//! # Sampling
//!
//! * Gaussians: `rand_distr::StandardNormal` (ziggurat), scaled by `√Δ`, then
//!   rounded to the dyadic grid `2^-36`. Rounding makes every partial sum of
//!   increments exact (while it stays below `2^17` in magnitude), so coarse
//!   increments are the exact sum of their fine sub-increments in any
//!   grouping, and coarsening is associative bitwise.
//! * Jump counts: Poisson(`λ(U)Δ`) by sequential inversion of one uniform
//!   (means above 16 are split into equal chunks).
//! * Jump marks: atom `i` with probability `w_i / λ(U)`, inverse CDF over the
//!   atom weights in declaration order.
//!
//! Changing any of the above changes every stream and needs a major version
//! bump.

use std::io::{self, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::model::{JumpFn, MarkMeasure};

/// Resolution of the dyadic grid Brownian increments are rounded to.
pub const INCREMENT_QUANTUM: f64 = 1.0 / (1u64 << 36) as f64;

const STREAM_BROWNIAN: u64 = 0;
const STREAM_JUMP: u64 = 1;
const STREAM_INITIAL: u64 = 2;
const POISSON_CHUNK_MEAN: f64 = 16.0;

#[derive(Debug, Error, PartialEq)]
pub enum DriverError {
    #[error("factor {factor} does not divide {steps} steps")]
    NonDivisibleFactor { steps: usize, factor: usize },
    #[error("expected a {expected} realization")]
    WrongKind { expected: &'static str },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of path `path_index` under `master_seed`.
pub fn path_seed(master_seed: u64, path_index: u64) -> u64 {
    splitmix64(master_seed.wrapping_add(splitmix64(path_index)))
}

fn stream(path_seed: u64, id: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    let mut state = path_seed;
    for chunk in key.chunks_exact_mut(8) {
        state = splitmix64(state);
        chunk.copy_from_slice(&state.to_le_bytes());
    }
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(id);
    rng
}

/// Random stream reserved for seeded initial data of one path.
pub fn initial_data_stream(path_seed: u64) -> ChaCha8Rng {
    stream(path_seed, STREAM_INITIAL)
}

/// Per-step jump events in compressed row form: the atoms hit during step
/// `k` are `atoms[offsets[k]..offsets[k + 1]]`.
#[derive(Debug, Clone, PartialEq)]
pub struct JumpEvents {
    pub offsets: Vec<usize>,
    pub atoms: Vec<u32>,
}

impl JumpEvents {
    pub fn step(&self, k: usize) -> &[u32] {
        &self.atoms[self.offsets[k]..self.offsets[k + 1]]
    }

    pub fn total(&self) -> usize {
        self.atoms.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Noise {
    /// Row-major `steps × dim` increments `ΔW_k`.
    Brownian { dim: usize, increments: Vec<f64> },
    Jump(JumpEvents),
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseRealization {
    pub delta: f64,
    pub steps: usize,
    pub master_seed: u64,
    pub path_index: u64,
    pub noise: Noise,
}

impl NoiseRealization {
    pub fn path_seed(&self) -> u64 {
        path_seed(self.master_seed, self.path_index)
    }

    pub fn is_brownian(&self) -> bool {
        matches!(self.noise, Noise::Brownian { .. })
    }

    /// `ΔW_k`, or `None` for a jump realization.
    pub fn increment(&self, k: usize) -> Option<&[f64]> {
        match &self.noise {
            Noise::Brownian { dim, increments } => Some(&increments[k * dim..(k + 1) * dim]),
            Noise::Jump(_) => None,
        }
    }

    pub fn increments_mut(&mut self) -> Option<&mut [f64]> {
        match &mut self.noise {
            Noise::Brownian { increments, .. } => Some(increments),
            Noise::Jump(_) => None,
        }
    }

    pub fn events(&self, k: usize) -> Option<&[u32]> {
        match &self.noise {
            Noise::Jump(ev) => Some(ev.step(k)),
            Noise::Brownian { .. } => None,
        }
    }

    pub fn jump_events(&self) -> Option<&JumpEvents> {
        match &self.noise {
            Noise::Jump(ev) => Some(ev),
            Noise::Brownian { .. } => None,
        }
    }

    /// `W(t_k)` for `k = 0..=steps`, row major, as running sums (exact, see
    /// the module docs).
    pub fn brownian_path(&self) -> Result<Vec<f64>, DriverError> {
        let Noise::Brownian { dim, increments } = &self.noise else {
            return Err(DriverError::WrongKind { expected: "brownian" });
        };
        let dim = *dim;
        let mut w = vec![0.0; (self.steps + 1) * dim];
        for k in 0..self.steps {
            for j in 0..dim {
                w[(k + 1) * dim + j] = w[k * dim + j] + increments[k * dim + j];
            }
        }
        Ok(w)
    }

    /// Debug dump as `step,component,value` (Brownian) or `step,event,atom`
    /// (jumps).
    pub fn write_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        match &self.noise {
            Noise::Brownian { dim, increments } => {
                writeln!(out, "step,component,increment")?;
                for (i, v) in increments.iter().enumerate() {
                    writeln!(out, "{},{},{:.16e}", i / dim, i % dim, v)?;
                }
            }
            Noise::Jump(ev) => {
                writeln!(out, "step,event,atom")?;
                for k in 0..self.steps {
                    for (e, a) in ev.step(k).iter().enumerate() {
                        writeln!(out, "{k},{e},{a}")?;
                    }
                }
            }
        }
        Ok(())
    }
}

fn check_grid(delta: f64, steps: usize) -> Result<(), DriverError> {
    if !(delta > 0.0 && delta.is_finite()) {
        return Err(DriverError::InvalidArgument(format!("delta = {delta} must be positive")));
    }
    if steps == 0 {
        return Err(DriverError::InvalidArgument("steps must be >= 1".into()));
    }
    Ok(())
}

fn quantize(v: f64) -> f64 {
    (v / INCREMENT_QUANTUM).round() * INCREMENT_QUANTUM
}

pub fn brownian_realization(
    master_seed: u64,
    path_index: u64,
    delta: f64,
    steps: usize,
    dim: usize,
) -> Result<NoiseRealization, DriverError> {
    check_grid(delta, steps)?;
    if dim == 0 {
        return Err(DriverError::InvalidArgument("dim must be >= 1".into()));
    }
    let mut rng = stream(path_seed(master_seed, path_index), STREAM_BROWNIAN);
    let scale = delta.sqrt();
    let increments = (0..steps * dim)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            quantize(scale * z)
        })
        .collect();
    Ok(NoiseRealization {
        delta,
        steps,
        master_seed,
        path_index,
        noise: Noise::Brownian { dim, increments },
    })
}

fn poisson_inversion<R: Rng>(rng: &mut R, mean: f64) -> usize {
    let u: f64 = rng.random();
    let mut k = 0usize;
    let mut p = (-mean).exp();
    let mut cdf = p;
    while u > cdf {
        k += 1;
        p *= mean / k as f64;
        let next = cdf + p;
        if next == cdf {
            // tail mass below rounding
            break;
        }
        cdf = next;
    }
    k
}

fn poisson<R: Rng>(rng: &mut R, mean: f64) -> usize {
    if mean <= POISSON_CHUNK_MEAN {
        return poisson_inversion(rng, mean);
    }
    let chunks = (mean / POISSON_CHUNK_MEAN).ceil() as usize;
    let part = mean / chunks as f64;
    (0..chunks).map(|_| poisson_inversion(rng, part)).sum()
}

fn sample_atom<R: Rng>(rng: &mut R, measure: &MarkMeasure) -> u32 {
    let target = rng.random::<f64>() * measure.total_mass();
    let mut acc = 0.0;
    for (i, w) in measure.weights().iter().enumerate() {
        acc += w;
        if target < acc {
            return i as u32;
        }
    }
    (measure.len() - 1) as u32
}

pub fn jump_realization(
    master_seed: u64,
    path_index: u64,
    delta: f64,
    steps: usize,
    measure: &MarkMeasure,
) -> Result<NoiseRealization, DriverError> {
    check_grid(delta, steps)?;
    let mut rng = stream(path_seed(master_seed, path_index), STREAM_JUMP);
    let mean = measure.total_mass() * delta;
    let mut offsets = Vec::with_capacity(steps + 1);
    let mut atoms = Vec::new();
    offsets.push(0);
    for _ in 0..steps {
        let count = poisson(&mut rng, mean);
        for _ in 0..count {
            atoms.push(sample_atom(&mut rng, measure));
        }
        offsets.push(atoms.len());
    }
    Ok(NoiseRealization {
        delta,
        steps,
        master_seed,
        path_index,
        noise: Noise::Jump(JumpEvents { offsets, atoms }),
    })
}

fn check_factor(steps: usize, factor: usize) -> Result<(), DriverError> {
    if factor == 0 || steps % factor != 0 {
        return Err(DriverError::NonDivisibleFactor { steps, factor });
    }
    Ok(())
}

/// Aggregates consecutive groups of `factor` fine increments, summed left to
/// right.
pub fn coarsen_brownian(
    fine: &NoiseRealization,
    factor: usize,
) -> Result<NoiseRealization, DriverError> {
    let Noise::Brownian { dim, increments } = &fine.noise else {
        return Err(DriverError::WrongKind { expected: "brownian" });
    };
    check_factor(fine.steps, factor)?;
    let dim = *dim;
    let steps = fine.steps / factor;
    let mut coarse = vec![0.0; steps * dim];
    for k in 0..steps {
        for j in 0..dim {
            let mut acc = increments[k * factor * dim + j];
            for s in 1..factor {
                acc += increments[(k * factor + s) * dim + j];
            }
            coarse[k * dim + j] = acc;
        }
    }
    Ok(NoiseRealization {
        delta: fine.delta * factor as f64,
        steps,
        master_seed: fine.master_seed,
        path_index: fine.path_index,
        noise: Noise::Brownian { dim, increments: coarse },
    })
}

/// Reassigns the events of fine steps `k·factor .. (k+1)·factor` to coarse
/// step `k`, keeping their order.
pub fn coarsen_jumps(
    fine: &NoiseRealization,
    factor: usize,
) -> Result<NoiseRealization, DriverError> {
    let Noise::Jump(ev) = &fine.noise else {
        return Err(DriverError::WrongKind { expected: "jump" });
    };
    check_factor(fine.steps, factor)?;
    let steps = fine.steps / factor;
    let offsets = (0..=steps).map(|k| ev.offsets[k * factor]).collect();
    Ok(NoiseRealization {
        delta: fine.delta * factor as f64,
        steps,
        master_seed: fine.master_seed,
        path_index: fine.path_index,
        noise: Noise::Jump(JumpEvents { offsets, atoms: ev.atoms.clone() }),
    })
}

/// Coarsens either kind of realization.
pub fn coarsen(fine: &NoiseRealization, factor: usize) -> Result<NoiseRealization, DriverError> {
    match fine.noise {
        Noise::Brownian { .. } => coarsen_brownian(fine, factor),
        Noise::Jump(_) => coarsen_jumps(fine, factor),
    }
}

/// `∫_U h(x, y, u) ΔÑ(du)` over one step: the sum of `h` at the realized
/// atoms minus the exact compensator `Δ Σ_i h(x, y, u_i) w_i`.
///
/// `scratch` must have the length of `out`.
#[allow(clippy::too_many_arguments)]
pub fn compensated_jump_integral(
    events: &[u32],
    measure: &MarkMeasure,
    h: &JumpFn,
    x: &[f64],
    y: &[f64],
    delta: f64,
    out: &mut [f64],
    scratch: &mut [f64],
) {
    out.iter_mut().for_each(|o| *o = 0.0);
    for &e in events {
        h(x, y, measure.mark(e as usize), scratch);
        for (o, s) in out.iter_mut().zip(scratch.iter()) {
            *o += s;
        }
    }
    for (u, w) in measure.atoms() {
        h(x, y, u, scratch);
        for (o, s) in out.iter_mut().zip(scratch.iter()) {
            *o -= delta * w * s;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::sync::Arc;

    fn brownian(increments: Vec<f64>) -> NoiseRealization {
        NoiseRealization {
            delta: 0.1,
            steps: increments.len(),
            master_seed: 0,
            path_index: 0,
            noise: Noise::Brownian { dim: 1, increments },
        }
    }

    #[test]
    fn brownian_is_reproducible_and_path_dependent() {
        let a = brownian_realization(7, 0, 0.01, 100, 2).unwrap();
        let b = brownian_realization(7, 0, 0.01, 100, 2).unwrap();
        let c = brownian_realization(7, 1, 0.01, 100, 2).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.increment(0), c.increment(0));
        assert!(a.increment(99).is_some());
    }

    #[test]
    fn brownian_sample_mean_within_clt_bound() {
        // 10^6 increments with Δ = 0.01: sd of the mean is √Δ / 10^3
        let r = brownian_realization(11, 3, 0.01, 1_000_000, 1).unwrap();
        let Noise::Brownian { increments, .. } = &r.noise else { unreachable!() };
        let n = increments.len() as f64;
        let mean = increments.iter().sum::<f64>() / n;
        assert!(mean.abs() < 4.0 * 0.1 / 1e3, "mean = {mean}");
        let var = increments.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        // variance of the sample variance of N(0, Δ): 2Δ²/n
        assert!((var - 0.01).abs() < 4.0 * (2.0f64).sqrt() * 0.01 / 1e3, "var = {var}");
    }

    #[test]
    fn increments_lie_on_the_dyadic_grid() {
        let r = brownian_realization(5, 9, 2f64.powi(-12), 64, 1).unwrap();
        let Noise::Brownian { increments, .. } = &r.noise else { unreachable!() };
        for v in increments {
            let q = v / INCREMENT_QUANTUM;
            assert_eq!(q, q.round());
        }
    }

    #[test]
    fn coarsen_sums_pairs() {
        let fine = brownian(vec![1.0, 2.0, 3.0, 4.5]);
        let coarse = coarsen_brownian(&fine, 2).unwrap();
        assert_eq!(coarse.steps, 2);
        assert_eq!(coarse.increment(0).unwrap(), &[3.0]);
        assert_eq!(coarse.increment(1).unwrap(), &[7.5]);
        assert!((coarse.delta - 0.2).abs() < 1e-15);
        assert_eq!(coarsen_brownian(&fine, 1).unwrap(), fine);
        assert_eq!(
            coarsen_brownian(&fine, 3),
            Err(DriverError::NonDivisibleFactor { steps: 4, factor: 3 })
        );
    }

    #[test]
    fn jump_counts_have_poisson_mean() {
        let measure = MarkMeasure::new(vec![(vec![0.1], 2.0), (vec![0.4], 1.0)]).unwrap();
        // λ(U)Δ = 0.3 over 10^5 steps
        let r = jump_realization(3, 0, 0.1, 100_000, &measure).unwrap();
        let ev = r.jump_events().unwrap();
        let mean = ev.total() as f64 / 1e5;
        assert!((mean - 0.3).abs() < 4.0 * (0.3f64 / 1e5).sqrt(), "mean = {mean}");
        let frac0 = ev.atoms.iter().filter(|&&a| a == 0).count() as f64 / ev.total() as f64;
        assert!((frac0 - 2.0 / 3.0).abs() < 0.02);

        let r = jump_realization(3, 0, 0.5, 20_000, &MarkMeasure::single(1.0, 2.0).unwrap()).unwrap();
        let ev = r.jump_events().unwrap();
        assert!((ev.total() as f64 / 2e4 - 1.0).abs() < 4.0 * (1.0f64 / 2e4).sqrt());
        assert!(ev.atoms.iter().all(|&a| a == 0));
    }

    #[test]
    fn large_poisson_means_are_split() {
        let measure = MarkMeasure::single(1.0, 1000.0).unwrap();
        let r = jump_realization(1, 0, 0.1, 2000, &measure).unwrap();
        let mean = r.jump_events().unwrap().total() as f64 / 2000.0;
        assert!((mean - 100.0).abs() < 4.0 * (100.0f64 / 2000.0).sqrt(), "mean = {mean}");
    }

    #[test]
    fn coarsen_jump_events() {
        let fine = NoiseRealization {
            delta: 0.1,
            steps: 2,
            master_seed: 0,
            path_index: 0,
            noise: Noise::Jump(JumpEvents { offsets: vec![0, 1, 2], atoms: vec![0, 1] }),
        };
        let coarse = coarsen_jumps(&fine, 2).unwrap();
        assert_eq!(coarse.events(0).unwrap(), &[0, 1]);
        let empty = NoiseRealization {
            noise: Noise::Jump(JumpEvents { offsets: vec![0, 0, 0], atoms: vec![] }),
            ..fine.clone()
        };
        assert_eq!(coarsen_jumps(&empty, 2).unwrap().jump_events().unwrap().total(), 0);
        assert!(matches!(coarsen_brownian(&fine, 2), Err(DriverError::WrongKind { .. })));
    }

    #[test]
    fn compensator_cases() {
        let measure = MarkMeasure::single(1.0, 2.0).unwrap();
        let c = 1.7;
        let h: JumpFn = Arc::new(move |_x: &[f64], _y: &[f64], u: &[f64], o: &mut [f64]| {
            o[0] = c * u[0].abs()
        });
        let mut out = [0.0];
        let mut s = [0.0];
        compensated_jump_integral(&[], &measure, &h, &[0.0], &[0.0], 0.1, &mut out, &mut s);
        assert!((out[0] + 0.2 * c).abs() < 1e-15);
        compensated_jump_integral(&[0], &measure, &h, &[0.0], &[0.0], 0.0, &mut out, &mut s);
        assert_eq!(out[0], c);
        let zero: JumpFn = Arc::new(|_x: &[f64], _y: &[f64], _u: &[f64], o: &mut [f64]| o[0] = 0.0);
        compensated_jump_integral(&[0, 0, 0], &measure, &zero, &[1.0], &[1.0], 0.1, &mut out, &mut s);
        assert_eq!(out[0], 0.0);
    }

    #[test]
    fn csv_dump_has_one_row_per_entry() {
        let r = brownian_realization(1, 2, 0.25, 3, 2).unwrap();
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 1 + 6);
        assert!(text.starts_with("step,component,increment\n0,0,"));
    }

    proptest! {
        #[test]
        fn coarsening_is_associative_bitwise(seed in any::<u64>(), path in 0u64..1000) {
            let fine = brownian_realization(seed, path, 2f64.powi(-10), 64, 2).unwrap();
            let twice = coarsen_brownian(&coarsen_brownian(&fine, 2).unwrap(), 2).unwrap();
            let once = coarsen_brownian(&fine, 4).unwrap();
            prop_assert_eq!(&twice.noise, &once.noise);
            // and each coarse increment is the exact left-to-right sum
            let Noise::Brownian { increments, .. } = &fine.noise else { unreachable!() };
            let c = once.increment(3).unwrap();
            let manual = ((increments[24] + increments[26]) + increments[28]) + increments[30];
            prop_assert_eq!(c[0].to_bits(), manual.to_bits());
        }

        #[test]
        fn coarsening_preserves_event_multiset(seed in any::<u64>(), factor in prop::sample::select(vec![2usize, 4, 8])) {
            let measure = MarkMeasure::new(vec![(vec![0.2], 1.0), (vec![0.5], 3.0)]).unwrap();
            let fine = jump_realization(seed, 0, 1.0 / 64.0, 64, &measure).unwrap();
            let coarse = coarsen_jumps(&fine, factor).unwrap();
            let fe = fine.jump_events().unwrap();
            let ce = coarse.jump_events().unwrap();
            prop_assert_eq!(fe.total(), ce.total());
            for k in 0..coarse.steps {
                let mut from_fine: Vec<u32> =
                    (k * factor..(k + 1) * factor).flat_map(|j| fe.step(j).to_vec()).collect();
                let mut got = ce.step(k).to_vec();
                from_fine.sort();
                got.sort();
                prop_assert_eq!(from_fine, got);
            }
        }
    }
}
