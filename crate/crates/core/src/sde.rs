//! Truncated Euler schemes for the strong-solution equations of the
//! one-dimensional generalized CBI-process, the two-dimensional affine process,
//! the catalytic CBI-process and its reactant pairs.
//!
//! All schemes share one step convention. Over `(t_k, t_{k+1}]` the drift,
//! the diffusion and the jump compensators are evaluated at the step-start
//! state. Jumps whose event time falls in the step are then added in time
//! order, thinned against the step-start intensity (the left limit at grid
//! resolution). Nonnegative components are clamped last.

use std::fmt;
use std::io::{self, Write};
use std::ops::Range;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::io::fmt_f64;
use crate::noise::{N0Event, N1Event, NoiseSystem, TimeGrid};
use crate::params::{AdmissibleParams, JumpMeasure, MeasureError, Region};

/// Explicit-Euler stability margin: `dt * rate` must not exceed this.
pub const STABILITY_MARGIN: f64 = 0.1;

#[derive(Debug, Error)]
pub enum SdeError {
    /// The thinning intensity exceeded the noise's `u_bound`. The partial
    /// bundle runs up to `aborted_at`; regenerate with a larger bound.
    #[error("thinning intensity exceeded u_bound at t = {:?}", .0.aborted_at)]
    BudgetExceeded(Box<PathBundle>),
    #[error("noise has {got} Brownian components, {needed} needed")]
    NotEnoughBrownian { needed: usize, got: usize },
    #[error("dt = {dt} violates the stability rule dt * {rate} <= {STABILITY_MARGIN}")]
    Unstable { dt: f64, rate: f64 },
    #[error("non-finite value in component {component} at t = {t}")]
    NonFinite { component: String, t: f64 },
    #[error("invalid initial value: {0}")]
    BadInitial(String),
    #[error("scheme prepared for eps = {scheme}, noise generated with eps = {noise}")]
    EpsMismatch { scheme: f64, noise: f64 },
    #[error("path of length {got} does not match the grid ({expected} points)")]
    GridMismatch { expected: usize, got: usize },
    #[error("coefficient {name} violates its bound at t = {t}")]
    CoefficientBound { name: &'static str, t: f64 },
    #[error("invalid coefficient specification: {0}")]
    BadSpec(String),
    #[error("reactant processes need beta22 < 0, got {0}")]
    NonNegativeBeta22(f64),
    #[error("invalid decomposition: {0}")]
    Decomposition(String),
    #[error(transparent)]
    Measure(#[from] MeasureError),
}

/// One simulated path: named components sampled at every grid point.
#[derive(Debug, Clone, PartialEq)]
pub struct PathBundle {
    pub grid: TimeGrid,
    pub components: Vec<(String, Vec<f64>)>,
    pub seed: u64,
    pub refinement: u32,
    pub eps: f64,
    pub u_bound: f64,
    /// Set when the run stopped early; the components end at this time.
    pub aborted_at: Option<f64>,
    /// Steps whose pre-clamp value of a nonnegative component was negative.
    pub clamped_steps: usize,
}

impl PathBundle {
    fn new(noise: &NoiseSystem, names: &[&str]) -> Self {
        let n = noise.grid().n_steps() + 1;
        Self {
            grid: noise.grid(),
            components: names
                .iter()
                .map(|s| (s.to_string(), Vec::with_capacity(n)))
                .collect(),
            seed: noise.seed(),
            refinement: noise.refinement(),
            eps: noise.eps(),
            u_bound: noise.u_bound(),
            aborted_at: None,
            clamped_steps: 0,
        }
    }

    fn push(&mut self, values: &[f64]) {
        for ((_, v), x) in self.components.iter_mut().zip(values) {
            v.push(*x);
        }
    }

    pub fn component(&self, name: &str) -> Option<&[f64]> {
        self.components
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.as_slice())
    }

    pub fn component_names(&self) -> Vec<&str> {
        self.components.iter().map(|(n, _)| n.as_str()).collect()
    }

    /// Number of stored grid points.
    pub fn len(&self) -> usize {
        self.components.first().map_or(0, |(_, v)| v.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.len()).map(|k| self.grid.time(k)).collect()
    }

    /// Value of a component at a grid time.
    pub fn value_at(&self, name: &str, t: f64) -> Option<f64> {
        let k = self.grid.index_of(t)?;
        self.component(name)?.get(k).copied()
    }

    pub fn csv_header(&self) -> String {
        let mut h = String::from("path_id,t");
        for (n, _) in &self.components {
            h.push(',');
            h.push_str(n);
        }
        h
    }

    /// Writes `path_id,t,<components>` rows (no header).
    pub fn write_csv_rows<W: Write>(&self, mut w: W, path_id: usize) -> io::Result<()> {
        for k in 0..self.len() {
            write!(w, "{path_id},{}", fmt_f64(self.grid.time(k)))?;
            for (_, v) in &self.components {
                write!(w, ",{}", fmt_f64(v[k]))?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

/// Nonnegative nondecreasing step function of time: `values[i]` on
/// `[knots[i], knots[i+1])`, the last value extending to infinity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepFunction {
    knots: Vec<f64>,
    values: Vec<f64>,
}

impl StepFunction {
    pub fn new(knots: Vec<f64>, values: Vec<f64>) -> Result<Self, SdeError> {
        let ok = !knots.is_empty()
            && knots.len() == values.len()
            && knots[0] == 0.0
            && knots.windows(2).all(|w| w[1] > w[0])
            && values.iter().all(|v| *v >= 0.0 && v.is_finite())
            && values.windows(2).all(|w| w[1] >= w[0]);
        if !ok {
            return Err(SdeError::BadSpec(
                "step function needs knots 0 = t0 < t1 < ... and nonnegative nondecreasing values"
                    .into(),
            ));
        }
        Ok(Self { knots, values })
    }

    pub fn constant(v: f64) -> Result<Self, SdeError> {
        Self::new(vec![0.0], vec![v])
    }

    pub fn at(&self, t: f64) -> f64 {
        let i = self.knots.partition_point(|&k| k <= t);
        self.values[i.saturating_sub(1)]
    }
}

/// Deterministic dominating functions for the coefficient processes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientBounds {
    pub sigma_bar: StepFunction,
    pub b_bar: StepFunction,
    pub beta_bar: StepFunction,
    pub l_bar: StepFunction,
}

/// A coefficient process: a constant, a recorded path on the simulation grid,
/// or a deterministic function of time.
#[derive(Clone)]
pub enum Coefficient {
    Constant(f64),
    Path(Vec<f64>),
    Fn(Arc<dyn Fn(f64) -> f64 + Send + Sync>),
}

impl fmt::Debug for Coefficient {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Coefficient::Constant(c) => write!(f, "Constant({c})"),
            Coefficient::Path(p) => write!(f, "Path(len {})", p.len()),
            Coefficient::Fn(_) => write!(f, "Fn(..)"),
        }
    }
}

impl Coefficient {
    fn at(&self, k: usize, t: f64) -> f64 {
        match self {
            Coefficient::Constant(c) => *c,
            Coefficient::Path(p) => p[k],
            Coefficient::Fn(f) => f(t),
        }
    }

    fn check_len(&self, n_points: usize) -> Result<(), SdeError> {
        match self {
            Coefficient::Path(p) if p.len() != n_points => Err(SdeError::GridMismatch {
                expected: n_points,
                got: p.len(),
            }),
            _ => Ok(()),
        }
    }
}

/// Coefficients of the one-dimensional equation with random parameters.
/// Jump marks are read from the first coordinate of the noise events.
#[derive(Debug, Clone)]
pub struct GeneralizedCbiSpec {
    pub theta0: f64,
    pub theta1: f64,
    /// One coefficient per Brownian component; `r = sigma.len()`.
    pub sigma: Vec<Coefficient>,
    pub b: Coefficient,
    pub beta: Coefficient,
    pub l: Coefficient,
    pub bounds: CoefficientBounds,
    pub m: JumpMeasure,
    pub mu: JumpMeasure,
}

impl GeneralizedCbiSpec {
    /// Constant coefficients with the tightest constant bounds.
    pub fn constant(
        theta0: f64,
        theta1: f64,
        sigma: Vec<f64>,
        b: f64,
        beta: f64,
        l: f64,
        m: JumpMeasure,
        mu: JumpMeasure,
    ) -> Result<Self, SdeError> {
        let norm = sigma.iter().map(|s| s * s).sum::<f64>().sqrt();
        Ok(Self {
            theta0,
            theta1,
            bounds: CoefficientBounds {
                sigma_bar: StepFunction::constant(norm)?,
                b_bar: StepFunction::constant(b.max(0.0))?,
                beta_bar: StepFunction::constant(beta.abs())?,
                l_bar: StepFunction::constant(l.max(0.0))?,
            },
            sigma: sigma.into_iter().map(Coefficient::Constant).collect(),
            b: Coefficient::Constant(b),
            beta: Coefficient::Constant(beta),
            l: Coefficient::Constant(l),
            m,
            mu,
        })
    }

    pub fn r(&self) -> usize {
        self.sigma.len()
    }
}

/// Sign-split coefficients `σ0 = σ0+ − σ0−`, `σ2j = σ2j+ − σ2j−`,
/// `b2 = b2+ − b2−`, `β21 = β21+ − β21−`, all parts nonnegative.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Decomposition {
    pub sigma0_plus: f64,
    pub sigma0_minus: f64,
    pub sigma21_plus: f64,
    pub sigma21_minus: f64,
    pub sigma22_plus: f64,
    pub sigma22_minus: f64,
    pub b2_plus: f64,
    pub b2_minus: f64,
    pub beta21_plus: f64,
    pub beta21_minus: f64,
}

impl Decomposition {
    /// Positive and negative parts of each coefficient.
    pub fn positive_parts(params: &AdmissibleParams) -> Self {
        let split = |v: f64| (v.max(0.0), (-v).max(0.0));
        let s = params.sigma();
        let (sigma0_plus, sigma0_minus) = split(params.sigma0());
        let (sigma21_plus, sigma21_minus) = split(s[1][0]);
        let (sigma22_plus, sigma22_minus) = split(s[1][1]);
        let (b2_plus, b2_minus) = split(params.b()[1]);
        let (beta21_plus, beta21_minus) = split(params.beta21());
        Self {
            sigma0_plus,
            sigma0_minus,
            sigma21_plus,
            sigma21_minus,
            sigma22_plus,
            sigma22_minus,
            b2_plus,
            b2_minus,
            beta21_plus,
            beta21_minus,
        }
    }

    /// Checks signs and that the parts recombine to the parameters.
    pub fn check(&self, params: &AdmissibleParams) -> Result<(), SdeError> {
        let s = params.sigma();
        let rows = [
            (
                "sigma0",
                self.sigma0_plus,
                self.sigma0_minus,
                params.sigma0(),
            ),
            ("sigma21", self.sigma21_plus, self.sigma21_minus, s[1][0]),
            ("sigma22", self.sigma22_plus, self.sigma22_minus, s[1][1]),
            ("b2", self.b2_plus, self.b2_minus, params.b()[1]),
            (
                "beta21",
                self.beta21_plus,
                self.beta21_minus,
                params.beta21(),
            ),
        ];
        for (name, p, m, v) in rows {
            if !(p >= 0.0 && m >= 0.0 && p.is_finite() && m.is_finite()) {
                return Err(SdeError::Decomposition(format!(
                    "{name} parts must be finite and >= 0, got ({p}, {m})"
                )));
            }
            if (p - m - v).abs() > 1e-9 * v.abs().max(1.0) {
                return Err(SdeError::Decomposition(format!(
                    "{name}_plus - {name}_minus = {} but {name} = {v}",
                    p - m
                )));
            }
        }
        Ok(())
    }
}

/// Which fluctuation system to simulate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ReactantMode {
    /// One reactant `y_k`, centered as `z_k = y_k − θ_k`; limit keeps only `D+` jumps.
    Single,
    /// Reactant pair `y_k±`, `z_k = y_k+ − y_k−`; limit is the affine `z`.
    Pair(Decomposition),
}

/// Per-step event index ranges: step `k` owns events with time in `(t_k, t_{k+1}]`.
struct StepEvents {
    n0: Vec<usize>,
    n1: Vec<usize>,
}

impl StepEvents {
    fn new(noise: &NoiseSystem) -> Self {
        let grid = noise.grid();
        let bounds = |times: &mut dyn Iterator<Item = f64>, len: usize| {
            let times: Vec<f64> = times.collect();
            let mut out = Vec::with_capacity(grid.n_steps() + 1);
            out.push(0);
            let mut i = 0;
            for k in 0..grid.n_steps() {
                let end = grid.time(k + 1);
                if k + 1 == grid.n_steps() {
                    i = len;
                } else {
                    while i < len && times[i] <= end {
                        i += 1;
                    }
                }
                out.push(i);
            }
            out
        };
        Self {
            n0: bounds(
                &mut noise.n0_events().iter().map(|e| e.time),
                noise.n0_events().len(),
            ),
            n1: bounds(
                &mut noise.n1_events().iter().map(|e| e.time),
                noise.n1_events().len(),
            ),
        }
    }

    fn n0(&self, k: usize) -> Range<usize> {
        self.n0[k]..self.n0[k + 1]
    }

    fn n1(&self, k: usize) -> Range<usize> {
        self.n1[k]..self.n1[k + 1]
    }
}

/// How the second-coordinate marks feed a z-type equation.
#[derive(Debug, Clone, Copy)]
struct JumpFeed {
    region: Region,
    /// `+1` adds `ξ2`, `−1` adds `−ξ2` (the `D−` reactant).
    sign: f64,
    compensate_n0: bool,
    /// `∫ ξ2 m(dξ)` over the retained band in `region`.
    m_comp: f64,
    /// `∫ ξ2 μ(dξ)` over the retained band in `region`.
    mu_comp: f64,
    /// Whether any `μ` mass in `region` is retained (thinning is then active).
    mu_active: bool,
}

impl JumpFeed {
    fn new(bands: &Bands, region: Region, sign: f64, compensate_n0: bool) -> Self {
        let (m, mu) = bands.region(region);
        Self {
            region,
            sign,
            compensate_n0,
            m_comp: m.mean[1],
            mu_comp: mu.mean[1],
            mu_active: mu.mass > 0.0,
        }
    }

    /// Compensator drift per unit time for thinning intensity `intensity`.
    fn compensator(&self, intensity: f64) -> f64 {
        let n0 = if self.compensate_n0 { self.m_comp } else { 0.0 };
        self.sign * (n0 + intensity * self.mu_comp)
    }

    fn jumps(&self, n0: &[N0Event], n1: &[N1Event], intensity: f64) -> f64 {
        let mut s = 0.0;
        for e in n0.iter().filter(|e| self.region.contains(e.xi)) {
            s += e.xi[1];
        }
        for e in n1
            .iter()
            .filter(|e| e.umark <= intensity && self.region.contains(e.xi))
        {
            s += e.xi[1];
        }
        self.sign * s
    }
}

#[derive(Debug, Clone, Copy)]
struct Bands {
    m: [crate::params::BandMoments; 3],
    mu: [crate::params::BandMoments; 3],
}

impl Bands {
    fn new(m: &JumpMeasure, mu: &JumpMeasure, eps: f64) -> Result<Self, MeasureError> {
        let r = [Region::All, Region::Upper, Region::Lower];
        Ok(Self {
            m: [
                m.band_moments(eps, r[0])?,
                m.band_moments(eps, r[1])?,
                m.band_moments(eps, r[2])?,
            ],
            mu: [
                mu.band_moments(eps, r[0])?,
                mu.band_moments(eps, r[1])?,
                mu.band_moments(eps, r[2])?,
            ],
        })
    }

    fn region(&self, region: Region) -> (crate::params::BandMoments, crate::params::BandMoments) {
        let i = match region {
            Region::All => 0,
            Region::Upper => 1,
            Region::Lower => 2,
        };
        (self.m[i], self.mu[i])
    }
}

/// Affine-family scheme with the band moments for one `eps` precomputed.
#[derive(Debug, Clone)]
pub struct AffineScheme {
    params: AdmissibleParams,
    eps: f64,
    bands: Bands,
    sigma0: f64,
    sigma: [[f64; 2]; 2],
}

/// Step-start quantities shared by every equation in the family.
struct StepCtx<'a> {
    dt: f64,
    inc: &'a [f64],
    n0: &'a [N0Event],
    n1: &'a [N1Event],
}

impl AffineScheme {
    pub fn new(params: &AdmissibleParams, eps: f64) -> Result<Self, SdeError> {
        Ok(Self {
            bands: Bands::new(params.m(), params.mu(), eps)?,
            eps,
            sigma0: params.sigma0(),
            sigma: params.sigma(),
            params: params.clone(),
        })
    }

    pub fn params(&self) -> &AdmissibleParams {
        &self.params
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    fn check_noise(&self, noise: &NoiseSystem) -> Result<(), SdeError> {
        if noise.eps() != self.eps {
            return Err(SdeError::EpsMismatch {
                scheme: self.eps,
                noise: noise.eps(),
            });
        }
        if noise.n_brownian() < 3 {
            return Err(SdeError::NotEnoughBrownian {
                needed: 3,
                got: noise.n_brownian(),
            });
        }
        let dt = noise.grid().dt();
        for rate in [self.params.beta22().abs(), self.params.beta11().abs()] {
            if dt * rate > STABILITY_MARGIN {
                return Err(SdeError::Unstable { dt, rate });
            }
        }
        Ok(())
    }

    fn mu_active(&self) -> bool {
        self.bands.mu[0].mass > 0.0
    }

    /// One step of the catalyst equation, before clamping.
    fn x_step(&self, x: f64, c: &StepCtx) -> f64 {
        let p = &self.params;
        let sq = (2.0 * x.max(0.0)).sqrt();
        let mut next = x
            + (p.b()[0] + p.beta11() * x) * c.dt
            + sq * (self.sigma[0][0] * c.inc[1] + self.sigma[0][1] * c.inc[2])
            - c.dt * x * self.bands.mu[0].mean[0];
        for e in c.n0 {
            next += e.xi[0];
        }
        for e in c.n1.iter().filter(|e| e.umark <= x) {
            next += e.xi[0];
        }
        next
    }

    /// Diffusion of a z-type equation:
    /// `c0 √(2 w0) dB0 + √(2 w12) (c1 dB1 + c2 dB2)`.
    fn z_diffusion(c: &StepCtx, coef: [f64; 3], w0: f64, w12: f64) -> f64 {
        coef[0] * (2.0 * w0.max(0.0)).sqrt() * c.inc[0]
            + (2.0 * w12.max(0.0)).sqrt() * (coef[1] * c.inc[1] + coef[2] * c.inc[2])
    }

    /// Drives the per-step closure over the grid, recording after each step.
    /// `step` returns `Ok(None)` when the thinning budget is exceeded.
    fn run<const C: usize>(
        &self,
        noise: &NoiseSystem,
        names: [&str; C],
        init: [f64; C],
        clamp: [bool; C],
        mut step: impl FnMut(&[f64; C], &StepCtx) -> Option<[f64; C]>,
        derive: impl Fn(&mut [f64; C]),
    ) -> Result<PathBundle, SdeError> {
        let grid = noise.grid();
        let events = StepEvents::new(noise);
        let mut bundle = PathBundle::new(noise, &names);
        let mut state = init;
        bundle.push(&state);
        for k in 0..grid.n_steps() {
            let ctx = StepCtx {
                dt: grid.dt(),
                inc: noise.increments(k),
                n0: &noise.n0_events()[events.n0(k)],
                n1: &noise.n1_events()[events.n1(k)],
            };
            let Some(mut next) = step(&state, &ctx) else {
                bundle.aborted_at = Some(grid.time(k));
                return Err(SdeError::BudgetExceeded(Box::new(bundle)));
            };
            let mut clamped = false;
            for j in 0..C {
                if !next[j].is_finite() {
                    return Err(SdeError::NonFinite {
                        component: names[j].to_string(),
                        t: grid.time(k + 1),
                    });
                }
                if clamp[j] && next[j] < 0.0 {
                    next[j] = 0.0;
                    clamped = true;
                }
            }
            bundle.clamped_steps += usize::from(clamped);
            derive(&mut next);
            state = next;
            bundle.push(&state);
        }
        Ok(bundle)
    }

    /// Euler scheme for the affine pair `(x, z)`.
    pub fn simulate_affine(
        &self,
        x0: f64,
        z0: f64,
        noise: &NoiseSystem,
    ) -> Result<PathBundle, SdeError> {
        check_nonneg("x0", x0)?;
        check_finite("z0", z0)?;
        self.check_noise(noise)?;
        let p = &self.params;
        let feed = JumpFeed::new(&self.bands, Region::All, 1.0, true);
        let u_bound = noise.u_bound();
        let zc = [self.sigma0, self.sigma[1][0], self.sigma[1][1]];
        let active = self.mu_active();
        self.run(
            noise,
            ["x", "z"],
            [x0, z0],
            [true, false],
            |s, c| {
                let [x, z] = *s;
                if active && x > u_bound {
                    return None;
                }
                let nx = self.x_step(x, c);
                let nz = z
                    + (p.b()[1] + p.beta21() * x + p.beta22() * z - feed.compensator(x)) * c.dt
                    + Self::z_diffusion(c, zc, 1.0, x)
                    + feed.jumps(c.n0, c.n1, x);
                Some([nx, nz])
            },
            |_| {},
        )
    }

    /// Variation-of-constants evaluation of `z` given a catalyst path
    /// simulated from the same noise.
    pub fn simulate_affine_voc(
        &self,
        x_path: &[f64],
        z0: f64,
        noise: &NoiseSystem,
    ) -> Result<Vec<f64>, SdeError> {
        check_finite("z0", z0)?;
        self.check_noise(noise)?;
        let grid = noise.grid();
        let n = grid.n_steps();
        if x_path.len() != n + 1 {
            return Err(SdeError::GridMismatch {
                expected: n + 1,
                got: x_path.len(),
            });
        }
        let p = &self.params;
        let b22 = p.beta22();
        let feed = JumpFeed::new(&self.bands, Region::All, 1.0, true);
        let zc = [self.sigma0, self.sigma[1][0], self.sigma[1][1]];
        let events = StepEvents::new(noise);
        let mut acc = 0.0;
        let mut out = Vec::with_capacity(n + 1);
        out.push(z0);
        for (k, &x) in x_path.iter().enumerate().take(n) {
            let tk = grid.time(k);
            let c = StepCtx {
                dt: grid.dt(),
                inc: noise.increments(k),
                n0: &noise.n0_events()[events.n0(k)],
                n1: &noise.n1_events()[events.n1(k)],
            };
            let w = (-b22 * tk).exp();
            acc += w
                * ((p.b()[1] + p.beta21() * x - feed.compensator(x)) * c.dt
                    + Self::z_diffusion(&c, zc, 1.0, x));
            for e in c.n0 {
                acc += (-b22 * e.time).exp() * e.xi[1];
            }
            for e in c.n1.iter().filter(|e| e.umark <= x) {
                acc += (-b22 * e.time).exp() * e.xi[1];
            }
            let t = grid.time(k + 1);
            let z = (b22 * t).exp() * (z0 + acc);
            if !z.is_finite() {
                return Err(SdeError::NonFinite {
                    component: "z".into(),
                    t,
                });
            }
            out.push(z);
        }
        Ok(out)
    }

    /// Catalyst `x` with reactant `y`; `y`-jumps use marks in `D+` with
    /// thinning intensity `l x y`.
    pub fn simulate_catalytic(
        &self,
        x0: f64,
        y0: f64,
        l: f64,
        noise: &NoiseSystem,
    ) -> Result<PathBundle, SdeError> {
        check_nonneg("x0", x0)?;
        check_nonneg("y0", y0)?;
        check_nonneg("l", l)?;
        self.check_noise(noise)?;
        let p = &self.params;
        let feed = JumpFeed::new(&self.bands, Region::Upper, 1.0, false);
        let u_bound = noise.u_bound();
        let zc = [self.sigma0, self.sigma[1][0], self.sigma[1][1]];
        let active_x = self.mu_active();
        self.run(
            noise,
            ["x", "y"],
            [x0, y0],
            [true, true],
            |s, c| {
                let [x, y] = *s;
                let iy = l * x * y;
                if (active_x && x > u_bound) || (feed.mu_active && iy > u_bound) {
                    return None;
                }
                let nx = self.x_step(x, c);
                let ny = y
                    + (p.b()[1] + p.beta21() * x * y + p.beta22() * y - feed.compensator(iy))
                        * c.dt
                    + Self::z_diffusion(c, zc, y, x * y)
                    + feed.jumps(c.n0, c.n1, iy);
                Some([nx, ny])
            },
            |_| {},
        )
    }

    /// The fluctuation system at level `theta`, returning `x`, the reactant(s)
    /// and the centered `z_k`.
    ///
    /// `y0` holds `[y_k(0)]` in single mode (second entry ignored) and
    /// `[y_k+(0), y_k−(0)]` in pair mode.
    pub fn simulate_reactant(
        &self,
        mode: ReactantMode,
        theta: f64,
        x0: f64,
        y0: [f64; 2],
        noise: &NoiseSystem,
    ) -> Result<PathBundle, SdeError> {
        let p = &self.params;
        if !(p.beta22() < 0.0) {
            return Err(SdeError::NonNegativeBeta22(p.beta22()));
        }
        if !(theta >= 1.0) || !theta.is_finite() {
            return Err(SdeError::BadInitial(format!(
                "theta must be >= 1, got {theta}"
            )));
        }
        check_nonneg("x0", x0)?;
        self.check_noise(noise)?;
        let u_bound = noise.u_bound();
        let active_x = self.mu_active();
        let b22 = p.beta22();
        match mode {
            ReactantMode::Single => {
                check_nonneg("y0", y0[0])?;
                let feed = JumpFeed::new(&self.bands, Region::Upper, 1.0, true);
                let zc = [self.sigma0, self.sigma[1][0], self.sigma[1][1]];
                let (b2, b21) = (p.b()[1], p.beta21());
                let start = [x0, y0[0], y0[0] - theta];
                self.run(
                    noise,
                    ["x", "y", "z_k"],
                    start,
                    [true, true, false],
                    |s, c| {
                        let [x, y, _] = *s;
                        let yt = y / theta;
                        let iy = x * yt;
                        if (active_x && x > u_bound) || (feed.mu_active && iy > u_bound) {
                            return None;
                        }
                        let nx = self.x_step(x, c);
                        let ny = reactant_step(c, &feed, zc, theta, b2, b21, b22, x, y);
                        Some([nx, ny, 0.0])
                    },
                    |s| s[2] = s[1] - theta,
                )
            }
            ReactantMode::Pair(d) => {
                d.check(p)?;
                check_nonneg("y0_plus", y0[0])?;
                check_nonneg("y0_minus", y0[1])?;
                let fp = JumpFeed::new(&self.bands, Region::Upper, 1.0, true);
                let fm = JumpFeed::new(&self.bands, Region::Lower, -1.0, true);
                let cp = [d.sigma0_plus, d.sigma21_plus, d.sigma22_plus];
                let cm = [d.sigma0_minus, d.sigma21_minus, d.sigma22_minus];
                let start = [x0, y0[0], y0[1], y0[0] - y0[1]];
                self.run(
                    noise,
                    ["x", "y_plus", "y_minus", "z_k"],
                    start,
                    [true, true, true, false],
                    |s, c| {
                        let [x, yp, ym, _] = *s;
                        let ip = x * yp / theta;
                        let im = x * ym / theta;
                        if (active_x && x > u_bound)
                            || (fp.mu_active && ip > u_bound)
                            || (fm.mu_active && im > u_bound)
                        {
                            return None;
                        }
                        let nx = self.x_step(x, c);
                        let np =
                            reactant_step(c, &fp, cp, theta, d.b2_plus, d.beta21_plus, b22, x, yp);
                        let nm = reactant_step(
                            c,
                            &fm,
                            cm,
                            theta,
                            d.b2_minus,
                            d.beta21_minus,
                            b22,
                            x,
                            ym,
                        );
                        Some([nx, np, nm, 0.0])
                    },
                    |s| s[3] = s[1] - s[2],
                )
            }
        }
    }

    /// The limit equation of the fluctuation system: `D+`-jump affine `z` in
    /// single mode, the full affine `z` in pair mode.
    pub fn simulate_limit(
        &self,
        mode: ReactantMode,
        x0: f64,
        z0: f64,
        noise: &NoiseSystem,
    ) -> Result<PathBundle, SdeError> {
        match mode {
            ReactantMode::Pair(d) => {
                d.check(&self.params)?;
                self.simulate_affine(x0, z0, noise)
            }
            ReactantMode::Single => {
                check_nonneg("x0", x0)?;
                check_finite("z0", z0)?;
                self.check_noise(noise)?;
                let p = &self.params;
                let feed = JumpFeed::new(&self.bands, Region::Upper, 1.0, true);
                let u_bound = noise.u_bound();
                let zc = [self.sigma0, self.sigma[1][0], self.sigma[1][1]];
                let active = self.mu_active();
                self.run(
                    noise,
                    ["x", "z"],
                    [x0, z0],
                    [true, false],
                    |s, c| {
                        let [x, z] = *s;
                        if active && x > u_bound {
                            return None;
                        }
                        let nx = self.x_step(x, c);
                        let nz = z
                            + (p.b()[1] + p.beta21() * x + p.beta22() * z - feed.compensator(x))
                                * c.dt
                            + Self::z_diffusion(c, zc, 1.0, x)
                            + feed.jumps(c.n0, c.n1, x);
                        Some([nx, nz])
                    },
                    |_| {},
                )
            }
        }
    }
}

/// One step of a reactant equation
/// `dy = (−θβ22 + β21 x ỹ + b2 ỹ + β22 y) dt + σ0 √(2ỹ) dB0 + √(2xỹ)(σ21 dB1 + σ22 dB2) + jumps`.
#[allow(clippy::too_many_arguments)]
fn reactant_step(
    c: &StepCtx,
    feed: &JumpFeed,
    coef: [f64; 3],
    theta: f64,
    b2: f64,
    beta21: f64,
    beta22: f64,
    x: f64,
    y: f64,
) -> f64 {
    let yt = y / theta;
    let intensity = x * yt;
    y + (-theta * beta22 + beta21 * x * yt + b2 * yt + beta22 * y - feed.compensator(intensity))
        * c.dt
        + AffineScheme::z_diffusion(c, coef, yt, x * yt)
        + feed.jumps(c.n0, c.n1, intensity)
}

fn check_nonneg(name: &str, v: f64) -> Result<(), SdeError> {
    if v >= 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(SdeError::BadInitial(format!(
            "{name} must be finite and >= 0, got {v}"
        )))
    }
}

fn check_finite(name: &str, v: f64) -> Result<(), SdeError> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(SdeError::BadInitial(format!(
            "{name} must be finite, got {v}"
        )))
    }
}

pub fn simulate_affine(
    params: &AdmissibleParams,
    x0: f64,
    z0: f64,
    noise: &NoiseSystem,
) -> Result<PathBundle, SdeError> {
    AffineScheme::new(params, noise.eps())?.simulate_affine(x0, z0, noise)
}

pub fn simulate_affine_voc(
    params: &AdmissibleParams,
    x_path: &[f64],
    z0: f64,
    noise: &NoiseSystem,
) -> Result<Vec<f64>, SdeError> {
    AffineScheme::new(params, noise.eps())?.simulate_affine_voc(x_path, z0, noise)
}

pub fn simulate_catalytic(
    params: &AdmissibleParams,
    x0: f64,
    y0: f64,
    l: f64,
    noise: &NoiseSystem,
) -> Result<PathBundle, SdeError> {
    AffineScheme::new(params, noise.eps())?.simulate_catalytic(x0, y0, l, noise)
}

pub fn simulate_reactant_pair(
    params: &AdmissibleParams,
    mode: ReactantMode,
    theta: f64,
    x0: f64,
    y0: [f64; 2],
    noise: &NoiseSystem,
) -> Result<PathBundle, SdeError> {
    AffineScheme::new(params, noise.eps())?.simulate_reactant(mode, theta, x0, y0, noise)
}

/// Euler scheme for the one-dimensional equation with random coefficients.
pub fn simulate_generalized_cbi(
    spec: &GeneralizedCbiSpec,
    x0: f64,
    noise: &NoiseSystem,
) -> Result<PathBundle, SdeError> {
    check_nonneg("x0", x0)?;
    let r = spec.r();
    if r == 0 {
        return Err(SdeError::BadSpec(
            "need at least one Brownian component".into(),
        ));
    }
    if !(spec.theta0 >= 0.0 && spec.theta1 >= 0.0) {
        return Err(SdeError::BadSpec("theta0 and theta1 must be >= 0".into()));
    }
    if noise.n_brownian() < r {
        return Err(SdeError::NotEnoughBrownian {
            needed: r,
            got: noise.n_brownian(),
        });
    }
    let grid = noise.grid();
    let n_points = grid.n_steps() + 1;
    for c in spec.sigma.iter().chain([&spec.b, &spec.beta, &spec.l]) {
        c.check_len(n_points)?;
    }
    let dt = grid.dt();
    let beta_bar = spec.bounds.beta_bar.at(grid.t_max());
    if dt * beta_bar > STABILITY_MARGIN {
        return Err(SdeError::Unstable { dt, rate: beta_bar });
    }
    let mu_band = spec.mu.band_moments(noise.eps(), Region::All)?;
    let comp = spec.theta1 * mu_band.mean[0];
    let active = mu_band.mass > 0.0;
    let events = StepEvents::new(noise);
    let u_bound = noise.u_bound();

    let mut bundle = PathBundle::new(noise, &["x"]);
    let mut x = x0;
    bundle.push(&[x]);
    for k in 0..grid.n_steps() {
        let t = grid.time(k);
        let sig: Vec<f64> = spec.sigma.iter().map(|c| c.at(k, t)).collect();
        let (b, beta, l) = (spec.b.at(k, t), spec.beta.at(k, t), spec.l.at(k, t));
        let bd = &spec.bounds;
        let sig_norm = sig.iter().map(|s| s * s).sum::<f64>().sqrt();
        let tol = 1e-12;
        if !(sig_norm <= bd.sigma_bar.at(t) * (1.0 + tol) + tol) {
            return Err(SdeError::CoefficientBound { name: "sigma", t });
        }
        if !(b >= 0.0 && b <= bd.b_bar.at(t) * (1.0 + tol) + tol) {
            return Err(SdeError::CoefficientBound { name: "b", t });
        }
        if !(beta.abs() <= bd.beta_bar.at(t) * (1.0 + tol) + tol) {
            return Err(SdeError::CoefficientBound { name: "beta", t });
        }
        if !(l >= 0.0 && l <= bd.l_bar.at(t) * (1.0 + tol) + tol) {
            return Err(SdeError::CoefficientBound { name: "l", t });
        }
        let intensity = l * x;
        if active && intensity > u_bound {
            bundle.aborted_at = Some(t);
            return Err(SdeError::BudgetExceeded(Box::new(bundle)));
        }
        let inc = noise.increments(k);
        let sq = (2.0 * x.max(0.0)).sqrt();
        let mut next = x + (b + beta * x) * dt - dt * intensity * comp;
        for (s, db) in sig.iter().zip(inc) {
            next += s * sq * db;
        }
        for e in &noise.n0_events()[events.n0(k)] {
            next += spec.theta0 * e.xi[0];
        }
        for e in noise.n1_events()[events.n1(k)]
            .iter()
            .filter(|e| e.umark <= intensity)
        {
            next += spec.theta1 * e.xi[0];
        }
        if !next.is_finite() {
            return Err(SdeError::NonFinite {
                component: "x".into(),
                t: grid.time(k + 1),
            });
        }
        if next < 0.0 {
            next = 0.0;
            bundle.clamped_steps += 1;
        }
        x = next;
        bundle.push(&[x]);
    }
    Ok(bundle)
}
