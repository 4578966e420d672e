//! Seeded, replayable driving noise: Brownian increments on a uniform grid and
//! the Poisson random measures `N0(ds, dξ)` (intensity `ds m(dξ)`) and
//! `N1(ds, du, dξ)` (intensity `ds du μ(dξ)`).
//!
//! `N1` is generated up to a dominating auxiliary-mark bound `u_bound`; the
//! simulators thin it against the current state-dependent intensity. Every
//! simulator that consumes the same [`NoiseSystem`] therefore sees exactly the
//! same candidate jumps.

use std::io::{self, Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp1, StandardNormal};
use thiserror::Error;

use crate::params::{JumpMeasure, MarkSampler, MeasureError};

/// Generator identifier recorded in output metadata.
pub const RNG_ID: &str = "chacha8/rand_chacha-0.9/splitmix-substreams";

const MAGIC: &[u8; 4] = b"AFLN";
const FORMAT_VERSION: u32 = 1;

const STREAM_BROWNIAN: u64 = 0;
const STREAM_N0: u64 = 1;
const STREAM_N1: u64 = 2;
const STREAM_BRIDGE: u64 = 16;

#[derive(Debug, Error)]
pub enum NoiseError {
    #[error("invalid grid: t_max = {t_max}, dt = {dt} (t_max must be a positive multiple of dt)")]
    BadGrid { t_max: f64, dt: f64 },
    #[error("u_bound must be finite and > 0, got {0}")]
    BadUBound(f64),
    #[error("eps must be finite and >= 0, got {0}")]
    BadEps(f64),
    #[error("{which} has infinite mass outside eps = {eps}; choose a larger eps")]
    InfiniteMass { which: &'static str, eps: f64 },
    #[error(transparent)]
    Measure(#[from] MeasureError),
    #[error("noise dump: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Uniform time grid `0, dt, 2 dt, ..., t_max`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    t_max: f64,
    dt: f64,
    n_steps: usize,
}

impl TimeGrid {
    pub fn new(t_max: f64, dt: f64) -> Result<Self, NoiseError> {
        let bad = NoiseError::BadGrid { t_max, dt };
        if !(dt > 0.0) || !(t_max > 0.0) || !t_max.is_finite() {
            return Err(bad);
        }
        let steps = t_max / dt;
        let n = steps.round();
        if (steps - n).abs() > 1e-9 * steps.max(1.0) || !(1.0..=1e9).contains(&n) {
            return Err(bad);
        }
        Ok(Self {
            t_max,
            dt,
            n_steps: n as usize,
        })
    }

    pub fn t_max(&self) -> f64 {
        self.t_max
    }
    pub fn dt(&self) -> f64 {
        self.dt
    }
    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    /// Time of grid point `k`; `time(n_steps)` is `t_max` exactly.
    pub fn time(&self, k: usize) -> f64 {
        if k == self.n_steps {
            self.t_max
        } else {
            k as f64 * self.dt
        }
    }

    pub fn times(&self) -> Vec<f64> {
        (0..=self.n_steps).map(|k| self.time(k)).collect()
    }

    /// Index of the grid point at time `t`, if `t` lies on the grid.
    pub fn index_of(&self, t: f64) -> Option<usize> {
        let k = (t / self.dt).round();
        if k < 0.0 || k > self.n_steps as f64 {
            return None;
        }
        let k = k as usize;
        ((self.time(k) - t).abs() <= 1e-9 * self.dt).then_some(k)
    }

    pub fn refined(&self) -> Self {
        Self {
            t_max: self.t_max,
            dt: self.dt / 2.0,
            n_steps: self.n_steps * 2,
        }
    }
}

/// Immigration event of `N0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct N0Event {
    pub time: f64,
    pub xi: [f64; 2],
}

/// Candidate branching event of `N1` with auxiliary mark `umark ∈ [0, u_bound)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct N1Event {
    pub time: f64,
    pub umark: f64,
    pub xi: [f64; 2],
}

/// One realization of the driving noise.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSystem {
    seed: u64,
    grid: TimeGrid,
    n_brownian: usize,
    /// Row-major `n_steps x n_brownian`.
    brownian: Vec<f64>,
    n0: Vec<N0Event>,
    n1: Vec<N1Event>,
    u_bound: f64,
    eps: f64,
    refinement: u32,
}

/// Mixes a master seed and a path index into an independent stream seed.
///
/// Injective in `path_index` for fixed `master_seed` and in `master_seed` for
/// fixed `path_index` (both maps are compositions of bijections on `u64`).
pub fn substream_seed(master_seed: u64, path_index: u64) -> u64 {
    const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;
    mix64(mix64(master_seed).wrapping_add(path_index.wrapping_mul(GOLDEN)))
}

fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Reusable generator: validates inputs and builds the mark samplers once.
#[derive(Debug, Clone)]
pub struct NoiseGenerator {
    grid: TimeGrid,
    n_brownian: usize,
    u_bound: f64,
    eps: f64,
    m_marks: MarkSampler,
    mu_marks: MarkSampler,
}

impl NoiseGenerator {
    pub fn new(
        m: &JumpMeasure,
        mu: &JumpMeasure,
        grid: TimeGrid,
        n_brownian: usize,
        u_bound: f64,
        eps: f64,
    ) -> Result<Self, NoiseError> {
        if !(u_bound > 0.0) || !u_bound.is_finite() {
            return Err(NoiseError::BadUBound(u_bound));
        }
        if !(eps >= 0.0) || !eps.is_finite() {
            return Err(NoiseError::BadEps(eps));
        }
        let m_marks = m.mark_sampler(eps)?;
        let mu_marks = mu.mark_sampler(eps)?;
        for (which, s) in [("m", &m_marks), ("mu", &mu_marks)] {
            if !s.mass().is_finite() {
                return Err(NoiseError::InfiniteMass { which, eps });
            }
        }
        Ok(Self {
            grid,
            n_brownian,
            u_bound,
            eps,
            m_marks,
            mu_marks,
        })
    }

    pub fn grid(&self) -> TimeGrid {
        self.grid
    }
    pub fn u_bound(&self) -> f64 {
        self.u_bound
    }

    /// Same generator with a different candidate-mark bound.
    pub fn with_u_bound(&self, u_bound: f64) -> Result<Self, NoiseError> {
        if !(u_bound > 0.0) || !u_bound.is_finite() {
            return Err(NoiseError::BadUBound(u_bound));
        }
        Ok(Self {
            u_bound,
            ..self.clone()
        })
    }

    pub fn generate(&self, seed: u64) -> NoiseSystem {
        let grid = self.grid;
        let sqrt_dt = grid.dt().sqrt();
        let mut rng = stream(seed, STREAM_BROWNIAN);
        let brownian = (0..grid.n_steps() * self.n_brownian)
            .map(|_| sqrt_dt * rng.sample::<f64, _>(StandardNormal))
            .collect();

        let t_max = grid.t_max();
        let mut n0 = Vec::new();
        let rate0 = self.m_marks.mass();
        if rate0 > 0.0 {
            let mut rng = stream(seed, STREAM_N0);
            let mut t = 0.0;
            loop {
                t += rng.sample::<f64, _>(Exp1) / rate0;
                if t > t_max {
                    break;
                }
                n0.push(N0Event {
                    time: t,
                    xi: self.m_marks.sample(&mut rng),
                });
            }
        }

        let mut n1 = Vec::new();
        let rate1 = self.u_bound * self.mu_marks.mass();
        if rate1 > 0.0 {
            let mut rng = stream(seed, STREAM_N1);
            let mut t = 0.0;
            loop {
                t += rng.sample::<f64, _>(Exp1) / rate1;
                if t > t_max {
                    break;
                }
                let umark = rng.random::<f64>() * self.u_bound;
                n1.push(N1Event {
                    time: t,
                    umark,
                    xi: self.mu_marks.sample(&mut rng),
                });
            }
        }

        NoiseSystem {
            seed,
            grid,
            n_brownian: self.n_brownian,
            brownian,
            n0,
            n1,
            u_bound: self.u_bound,
            eps: self.eps,
            refinement: 0,
        }
    }
}

/// One-shot form of [`NoiseGenerator::generate`].
pub fn generate_noise(
    m: &JumpMeasure,
    mu: &JumpMeasure,
    grid: TimeGrid,
    n_brownian: usize,
    seed: u64,
    u_bound: f64,
    eps: f64,
) -> Result<NoiseSystem, NoiseError> {
    Ok(NoiseGenerator::new(m, mu, grid, n_brownian, u_bound, eps)?.generate(seed))
}

impl NoiseSystem {
    pub fn seed(&self) -> u64 {
        self.seed
    }
    pub fn grid(&self) -> TimeGrid {
        self.grid
    }
    pub fn n_brownian(&self) -> usize {
        self.n_brownian
    }
    pub fn u_bound(&self) -> f64 {
        self.u_bound
    }
    pub fn eps(&self) -> f64 {
        self.eps
    }
    pub fn refinement(&self) -> u32 {
        self.refinement
    }
    pub fn n0_events(&self) -> &[N0Event] {
        &self.n0
    }
    pub fn n1_events(&self) -> &[N1Event] {
        &self.n1
    }

    /// Brownian increments of step `k` (over `(t_k, t_{k+1}]`), one per component.
    pub fn increments(&self, k: usize) -> &[f64] {
        &self.brownian[k * self.n_brownian..(k + 1) * self.n_brownian]
    }

    /// Halves the grid step. Each increment is split at a Brownian-bridge
    /// midpoint drawn from a dedicated substream; the events are unchanged.
    pub fn refine(&self) -> NoiseSystem {
        let r = self.n_brownian;
        let half_sd = 0.5 * self.grid.dt().sqrt();
        let mut rng = stream(self.seed, STREAM_BRIDGE + u64::from(self.refinement));
        let mut brownian = Vec::with_capacity(self.brownian.len() * 2);
        for k in 0..self.grid.n_steps() {
            let inc = self.increments(k);
            let mut first = Vec::with_capacity(r);
            let mut second = Vec::with_capacity(r);
            for &db in inc {
                let z: f64 = rng.sample(StandardNormal);
                let a = 0.5 * db + half_sd * z;
                first.push(a);
                second.push(db - a);
            }
            brownian.extend(first);
            brownian.extend(second);
        }
        NoiseSystem {
            grid: self.grid.refined(),
            brownian,
            refinement: self.refinement + 1,
            ..self.clone()
        }
    }

    /// Binary dump: `"AFLN"`, format version, seed, grid, counts, then data (little endian).
    pub fn write_to<W: Write>(&self, mut w: W) -> io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&self.seed.to_le_bytes())?;
        w.write_all(&self.grid.t_max().to_le_bytes())?;
        w.write_all(&self.grid.dt().to_le_bytes())?;
        w.write_all(&(self.grid.n_steps() as u64).to_le_bytes())?;
        w.write_all(&(self.n_brownian as u32).to_le_bytes())?;
        w.write_all(&self.refinement.to_le_bytes())?;
        w.write_all(&self.u_bound.to_le_bytes())?;
        w.write_all(&self.eps.to_le_bytes())?;
        w.write_all(&(self.n0.len() as u64).to_le_bytes())?;
        w.write_all(&(self.n1.len() as u64).to_le_bytes())?;
        for v in &self.brownian {
            w.write_all(&v.to_le_bytes())?;
        }
        for e in &self.n0 {
            for v in [e.time, e.xi[0], e.xi[1]] {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        for e in &self.n1 {
            for v in [e.time, e.umark, e.xi[0], e.xi[1]] {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<NoiseSystem, NoiseError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(NoiseError::Format("bad magic bytes".into()));
        }
        let version = read_u32(&mut r)?;
        if version != FORMAT_VERSION {
            return Err(NoiseError::Format(format!(
                "unsupported format version {version}"
            )));
        }
        let seed = read_u64(&mut r)?;
        let t_max = read_f64(&mut r)?;
        let dt = read_f64(&mut r)?;
        let n_steps = read_u64(&mut r)? as usize;
        let n_brownian = read_u32(&mut r)? as usize;
        let refinement = read_u32(&mut r)?;
        let u_bound = read_f64(&mut r)?;
        let eps = read_f64(&mut r)?;
        let n0_len = read_u64(&mut r)? as usize;
        let n1_len = read_u64(&mut r)? as usize;
        let grid = TimeGrid::new(t_max, dt)?;
        if grid.n_steps() != n_steps {
            return Err(NoiseError::Format("step count does not match grid".into()));
        }
        let brownian = (0..n_steps * n_brownian)
            .map(|_| read_f64(&mut r))
            .collect::<io::Result<Vec<_>>>()?;
        let mut n0 = Vec::with_capacity(n0_len);
        for _ in 0..n0_len {
            let time = read_f64(&mut r)?;
            let xi = [read_f64(&mut r)?, read_f64(&mut r)?];
            n0.push(N0Event { time, xi });
        }
        let mut n1 = Vec::with_capacity(n1_len);
        for _ in 0..n1_len {
            let time = read_f64(&mut r)?;
            let umark = read_f64(&mut r)?;
            let xi = [read_f64(&mut r)?, read_f64(&mut r)?];
            n1.push(N1Event { time, umark, xi });
        }
        Ok(NoiseSystem {
            seed,
            grid,
            n_brownian,
            brownian,
            n0,
            n1,
            u_bound,
            eps,
            refinement,
        })
    }
}

fn read_u32<R: Read>(r: &mut R) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64<R: Read>(r: &mut R) -> io::Result<f64> {
    Ok(f64::from_bits(read_u64(r)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> TimeGrid {
        TimeGrid::new(2.0, 1.0 / 64.0).unwrap()
    }

    #[test]
    fn grid_validation() {
        assert!(TimeGrid::new(1.0, 0.3).is_err());
        assert!(TimeGrid::new(0.0, 0.1).is_err());
        let g = TimeGrid::new(1.0, 0.1).unwrap();
        assert_eq!(g.n_steps(), 10);
        assert_eq!(g.time(10), 1.0);
        assert_eq!(g.index_of(0.5), Some(5));
        assert_eq!(g.index_of(0.55), None);
    }

    #[test]
    fn empty_measures_give_brownian_only() {
        let e = JumpMeasure::empty();
        let n = generate_noise(&e, &e, grid(), 3, 7, 10.0, 0.0).unwrap();
        assert!(n.n0_events().is_empty() && n.n1_events().is_empty());
        assert_eq!(n.increments(5).len(), 3);
    }

    #[test]
    fn deterministic_in_seed() {
        let m = JumpMeasure::atomic([([1.0, 0.5], 2.0)]).unwrap();
        let mu = JumpMeasure::product_exponential(1.0, 2.0, 2.0, 0.5).unwrap();
        let a = generate_noise(&m, &mu, grid(), 3, 11, 5.0, 1e-4).unwrap();
        let b = generate_noise(&m, &mu, grid(), 3, 11, 5.0, 1e-4).unwrap();
        assert_eq!(a, b);
        let c = generate_noise(&m, &mu, grid(), 3, 12, 5.0, 1e-4).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn umarks_and_times_in_range() {
        let mu = JumpMeasure::atomic([([1.0, 0.0], 1.5)]).unwrap();
        let n = generate_noise(&JumpMeasure::empty(), &mu, grid(), 1, 3, 4.0, 0.0).unwrap();
        assert!(!n.n1_events().is_empty());
        for w in n.n1_events().windows(2) {
            assert!(w[0].time <= w[1].time);
        }
        for e in n.n1_events() {
            assert!((0.0..4.0).contains(&e.umark));
            assert!(e.time > 0.0 && e.time <= 2.0);
        }
    }

    #[test]
    fn rejects_bad_generator_inputs() {
        let e = JumpMeasure::empty();
        assert!(matches!(
            NoiseGenerator::new(&e, &e, grid(), 3, 0.0, 0.0),
            Err(NoiseError::BadUBound(_))
        ));
        assert!(matches!(
            NoiseGenerator::new(&e, &e, grid(), 3, 1.0, -1.0),
            Err(NoiseError::BadEps(_))
        ));
    }

    #[test]
    fn refinement_preserves_increment_sums_and_events() {
        let m = JumpMeasure::atomic([([1.0, 0.5], 2.0)]).unwrap();
        let n = generate_noise(&m, &m, grid(), 3, 5, 3.0, 0.0).unwrap();
        let f = n.refine();
        assert_eq!(f.grid().n_steps(), 2 * n.grid().n_steps());
        assert_eq!(f.n0_events(), n.n0_events());
        assert_eq!(f.n1_events(), n.n1_events());
        for k in 0..n.grid().n_steps() {
            for j in 0..3 {
                let s = f.increments(2 * k)[j] + f.increments(2 * k + 1)[j];
                assert!((s - n.increments(k)[j]).abs() <= 1e-15);
            }
        }
        let ff = f.refine();
        assert_eq!(ff.refinement(), 2);
        assert_ne!(ff.increments(0)[0], f.increments(0)[0] / 2.0);
    }

    #[test]
    fn dump_round_trip() {
        let m = JumpMeasure::atomic([([1.0, 0.5], 2.0), ([0.2, -0.3], 1.0)]).unwrap();
        let n = generate_noise(&m, &m, grid(), 3, 99, 3.0, 0.0)
            .unwrap()
            .refine();
        let mut buf = Vec::new();
        n.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"AFLN");
        let back = NoiseSystem::read_from(buf.as_slice()).unwrap();
        assert_eq!(back, n);
        buf[0] = b'X';
        assert!(NoiseSystem::read_from(buf.as_slice()).is_err());
    }

    #[test]
    fn substream_seed_examples() {
        assert_eq!(substream_seed(42, 7), substream_seed(42, 7));
        assert_ne!(substream_seed(42, 7), substream_seed(42, 8));
        assert_ne!(substream_seed(42, 0), substream_seed(43, 0));
    }
}
