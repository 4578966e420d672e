//! Monte Carlo experiments that confront simulated paths with the transform,
//! the first-moment formulas, the generators and the fluctuation limits.
//!
//! Tolerances are `3 * stderr + bias`, where the scheme bias is calibrated
//! from a control run at half the step on the refined common noise: with
//! first-order bias `c dt`, the estimates at `dt` and `dt/2` differ by about
//! `c dt / 2`, so `3 |est(dt) − est(dt/2)|` covers the bias at `dt` with a
//! factor 1.5 to spare.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Duration;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::noise::{substream_seed, NoiseError, NoiseGenerator, NoiseSystem, TimeGrid, RNG_ID};
use crate::params::{
    AdmissibleParams, Compensation, JumpMeasure, MeasureError, MomentKind, Region, UPoint,
};
use crate::sde::{
    self, AffineScheme, GeneralizedCbiSpec, PathBundle, ReactantMode, SdeError, STABILITY_MARGIN,
};
use crate::transform::{self, TransformError};

/// Doublings of `u_bound` attempted before a path is given up.
pub const MAX_BUDGET_RETRIES: u32 = 16;

#[derive(Debug, Error)]
pub enum ValidateError {
    #[error(transparent)]
    Sde(#[from] SdeError),
    #[error(transparent)]
    Noise(#[from] NoiseError),
    #[error(transparent)]
    Transform(#[from] TransformError),
    #[error(transparent)]
    Measure(#[from] MeasureError),
    #[error("empty ensemble")]
    EmptyEnsemble,
    #[error("time {0} is not on the simulation grid")]
    OffGrid(f64),
    #[error("u_bound still exceeded after {MAX_BUDGET_RETRIES} doublings on path {path}")]
    BudgetExhausted { path: usize },
    #[error("invalid experiment input: {0}")]
    BadInput(String),
    #[error("worker pool: {0}")]
    Pool(String),
}

/// Monte Carlo settings shared by the experiments.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MonteCarlo {
    pub n_paths: usize,
    pub seed: u64,
    pub dt: f64,
    pub eps: f64,
    pub u_bound: f64,
    /// Worker threads; `None` uses the available parallelism.
    #[serde(skip)]
    pub workers: Option<usize>,
}

impl MonteCarlo {
    pub fn new(n_paths: usize, seed: u64, dt: f64) -> Self {
        Self {
            n_paths,
            seed,
            dt,
            eps: 1e-4,
            u_bound: 32.0,
            workers: None,
        }
    }

    fn check(&self) -> Result<(), ValidateError> {
        if self.n_paths < 2 {
            return Err(ValidateError::BadInput(format!(
                "n_paths must be >= 2, got {}",
                self.n_paths
            )));
        }
        Ok(())
    }
}

/// Runs `f` on one noise realization per path, in parallel, returning the
/// results in path order. A path whose thinning budget is exceeded is rerun
/// from the same substream seed with `u_bound` doubled; `f` must therefore
/// simulate every coupled member from the noise it is given.
pub fn run_paths<T, F>(
    mc: &MonteCarlo,
    generator: &NoiseGenerator,
    f: F,
) -> Result<(Vec<T>, usize), ValidateError>
where
    T: Send,
    F: Fn(&NoiseSystem) -> Result<T, SdeError> + Sync,
{
    let work = |i: usize| -> Result<(T, usize), ValidateError> {
        let seed = substream_seed(mc.seed, i as u64);
        let mut noise = generator.generate(seed);
        let mut retries = 0u32;
        loop {
            match f(&noise) {
                Ok(v) => return Ok((v, retries as usize)),
                Err(SdeError::BudgetExceeded(_)) if retries < MAX_BUDGET_RETRIES => {
                    retries += 1;
                    let bound = generator.u_bound() * f64::powi(2.0, retries as i32);
                    noise = generator.with_u_bound(bound)?.generate(seed);
                }
                Err(SdeError::BudgetExceeded(_)) => {
                    return Err(ValidateError::BudgetExhausted { path: i })
                }
                Err(e) => return Err(e.into()),
            }
        }
    };
    let run = || {
        (0..mc.n_paths)
            .into_par_iter()
            .map(work)
            .collect::<Result<Vec<_>, _>>()
    };
    let out = match mc.workers {
        Some(w) => rayon::ThreadPoolBuilder::new()
            .num_threads(w.max(1))
            .build()
            .map_err(|e| ValidateError::Pool(e.to_string()))?
            .install(run)?,
        None => run()?,
    };
    let retries = out.iter().map(|(_, r)| r).sum();
    Ok((out.into_iter().map(|(v, _)| v).collect(), retries))
}

/// Sample mean and standard error of the mean.
pub fn mean_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Monte Carlo estimate of `E[exp(u1 X1(t) + u2 X2(t))]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CharFnEstimate {
    pub u: UPoint,
    pub t: f64,
    pub estimate: Complex64,
    pub stderr: f64,
    pub n_paths: usize,
}

/// Estimate from state samples `[x1, x2]` at time `t`.
pub fn char_fn_from_samples(
    samples: &[[f64; 2]],
    t: f64,
    u: UPoint,
) -> Result<CharFnEstimate, ValidateError> {
    if samples.is_empty() {
        return Err(ValidateError::EmptyEnsemble);
    }
    let vals: Vec<Complex64> = samples
        .iter()
        .map(|s| (u.u1 * s[0] + u.u2 * s[1]).exp())
        .collect();
    let re: Vec<f64> = vals.iter().map(|v| v.re).collect();
    let im: Vec<f64> = vals.iter().map(|v| v.im).collect();
    let (mr, sr) = mean_stderr(&re);
    let (mi, si) = mean_stderr(&im);
    Ok(CharFnEstimate {
        u,
        t,
        estimate: Complex64::new(mr, mi),
        stderr: sr.hypot(si),
        n_paths: samples.len(),
    })
}

/// Empirical characteristic function of the selected components of an
/// ensemble at grid time `t`. A `None` component contributes zero.
pub fn empirical_char_fn(
    paths: &[PathBundle],
    components: [Option<&str>; 2],
    t: f64,
    u: UPoint,
) -> Result<CharFnEstimate, ValidateError> {
    if paths.is_empty() {
        return Err(ValidateError::EmptyEnsemble);
    }
    let samples = paths
        .iter()
        .map(|p| {
            let get = |c: Option<&str>| match c {
                None => Ok(0.0),
                Some(name) => p.value_at(name, t).ok_or(ValidateError::OffGrid(t)),
            };
            Ok([get(components[0])?, get(components[1])?])
        })
        .collect::<Result<Vec<_>, ValidateError>>()?;
    char_fn_from_samples(&samples, t, u)
}

/// One comparison of a prediction with an observation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRow {
    pub quantity: String,
    pub predicted: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub predicted_im: Option<f64>,
    pub observed: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub observed_im: Option<f64>,
    pub deviation: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl ReportRow {
    /// Two-sided check `|observed − predicted| <= tolerance`.
    pub fn two_sided(
        quantity: impl Into<String>,
        predicted: f64,
        observed: f64,
        tolerance: f64,
    ) -> Self {
        let deviation = (observed - predicted).abs();
        Self {
            quantity: quantity.into(),
            predicted,
            predicted_im: None,
            observed,
            observed_im: None,
            deviation,
            tolerance,
            pass: deviation <= tolerance,
        }
    }

    /// Complex two-sided check on the modulus of the difference.
    pub fn complex(
        quantity: impl Into<String>,
        predicted: Complex64,
        observed: Complex64,
        tolerance: f64,
    ) -> Self {
        let deviation = (observed - predicted).norm();
        Self {
            quantity: quantity.into(),
            predicted: predicted.re,
            predicted_im: Some(predicted.im),
            observed: observed.re,
            observed_im: Some(observed.im),
            deviation,
            tolerance,
            pass: deviation <= tolerance,
        }
    }

    /// One-sided check `observed <= bound + tolerance`.
    pub fn upper_bound(
        quantity: impl Into<String>,
        bound: f64,
        observed: f64,
        tolerance: f64,
    ) -> Self {
        let deviation = (observed - bound).max(0.0);
        Self {
            quantity: quantity.into(),
            predicted: bound,
            predicted_im: None,
            observed,
            observed_im: None,
            deviation,
            tolerance,
            pass: deviation <= tolerance,
        }
    }
}

/// Outcome of one experiment. Serializes deterministically: the runtime is
/// kept out of the JSON so reruns produce identical bytes.
#[derive(Debug, Clone, Serialize)]
pub struct ExperimentReport {
    pub name: String,
    pub inputs_digest: String,
    pub inputs: Value,
    pub pass: bool,
    pub rows: Vec<ReportRow>,
    pub extra: BTreeMap<String, Value>,
    #[serde(skip)]
    pub runtime: Duration,
}

impl ExperimentReport {
    pub fn new(name: impl Into<String>, inputs: Value) -> Self {
        let digest = Sha256::digest(serde_json::to_vec(&inputs).expect("JSON value serializes"));
        let inputs_digest = digest.iter().fold(String::new(), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        });
        Self {
            name: name.into(),
            inputs_digest,
            inputs,
            pass: true,
            rows: Vec::new(),
            extra: BTreeMap::new(),
            runtime: Duration::ZERO,
        }
    }

    pub fn push(&mut self, row: ReportRow) {
        self.pass &= row.pass;
        self.rows.push(row);
    }

    pub fn first_failure(&self) -> Option<&ReportRow> {
        self.rows.iter().find(|r| !r.pass)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Fixed-width table for terminal output.
    pub fn table(&self) -> String {
        let mut s = format!(
            "{} [{}]\n{:<36} {:>14} {:>14} {:>11} {:>11}  {}\n",
            self.name,
            if self.pass { "PASS" } else { "FAIL" },
            "quantity",
            "predicted",
            "observed",
            "deviation",
            "tolerance",
            "ok"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<36} {:>14.6e} {:>14.6e} {:>11.3e} {:>11.3e}  {}",
                r.quantity,
                r.predicted,
                r.observed,
                r.deviation,
                r.tolerance,
                if r.pass { "pass" } else { "FAIL" }
            );
        }
        s
    }
}

fn base_inputs(params: &AdmissibleParams, mc: &MonteCarlo) -> serde_json::Map<String, Value> {
    let mut m = serde_json::Map::new();
    m.insert("params".into(), json!(params));
    m.insert("mc".into(), json!(mc));
    m.insert("rng".into(), json!(RNG_ID));
    m
}

fn grid_for(t_max: f64, dt: f64) -> Result<TimeGrid, ValidateError> {
    Ok(TimeGrid::new(t_max, dt)?)
}

fn grid_indices(grid: &TimeGrid, times: &[f64]) -> Result<Vec<usize>, ValidateError> {
    times
        .iter()
        .map(|&t| grid.index_of(t).ok_or(ValidateError::OffGrid(t)))
        .collect()
}

fn check_times(t_list: &[f64]) -> Result<f64, ValidateError> {
    if t_list.is_empty() || t_list.iter().any(|t| !(*t > 0.0) || !t.is_finite()) {
        return Err(ValidateError::BadInput(
            "check times must be positive".into(),
        ));
    }
    Ok(t_list.iter().cloned().fold(0.0, f64::max))
}

fn check_u_list(u_list: &[UPoint]) -> Result<(), ValidateError> {
    for u in u_list {
        UPoint::new(u.u1, u.u2).map_err(|e| ValidateError::BadInput(e.to_string()))?;
    }
    Ok(())
}

/// `(x, z)` samples at the check times, at `dt` and on the refined noise at `dt/2`.
type CoupledSamples = (Vec<[f64; 2]>, Vec<[f64; 2]>);

fn affine_samples(
    params: &AdmissibleParams,
    x0: f64,
    z0: f64,
    t_list: &[f64],
    mc: &MonteCarlo,
) -> Result<(Vec<CoupledSamples>, usize), ValidateError> {
    let t_max = check_times(t_list)?;
    let grid = grid_for(t_max, mc.dt)?;
    let idx = grid_indices(&grid, t_list)?;
    let idx_fine: Vec<usize> = idx.iter().map(|k| 2 * k).collect();
    let scheme = AffineScheme::new(params, mc.eps)?;
    let generator = NoiseGenerator::new(params.m(), params.mu(), grid, 3, mc.u_bound, mc.eps)?;
    let pick = |b: &PathBundle, ks: &[usize]| -> Vec<[f64; 2]> {
        let x = b.component("x").expect("x component");
        let z = b.component("z").expect("z component");
        ks.iter().map(|&k| [x[k], z[k]]).collect()
    };
    run_paths(mc, &generator, |noise| {
        let coarse = scheme.simulate_affine(x0, z0, noise)?;
        let fine = scheme.simulate_affine(x0, z0, &noise.refine())?;
        Ok((pick(&coarse, &idx), pick(&fine, &idx_fine)))
    })
}

/// Compares the empirical characteristic function of `(x(t), z(t))` with the
/// transform for every `(t, u)` pair.
pub fn check_affine_formula(
    params: &AdmissibleParams,
    x0: f64,
    z0: f64,
    t_list: &[f64],
    u_list: &[UPoint],
    mc: &MonteCarlo,
) -> Result<ExperimentReport, ValidateError> {
    mc.check()?;
    check_u_list(u_list)?;
    let (samples, retries) = affine_samples(params, x0, z0, t_list, mc)?;
    let mut inputs = base_inputs(params, mc);
    inputs.insert("x0".into(), json!([x0, z0]));
    inputs.insert("t_list".into(), json!(t_list));
    inputs.insert("u_list".into(), json!(u_list));
    let mut report = ExperimentReport::new("affine_formula", Value::Object(inputs));

    let mut rows = Vec::new();
    let mut worst_gap: f64 = 0.0;
    for (j, &t) in t_list.iter().enumerate() {
        let coarse: Vec<[f64; 2]> = samples.iter().map(|s| s.0[j]).collect();
        let fine: Vec<[f64; 2]> = samples.iter().map(|s| s.1[j]).collect();
        for &u in u_list {
            let est = char_fn_from_samples(&coarse, t, u)?;
            let control = char_fn_from_samples(&fine, t, u)?;
            worst_gap = worst_gap.max((est.estimate - control.estimate).norm());
            let predicted = transform::char_fn(params, [x0, z0], t, u)?;
            rows.push((t, u, est, predicted));
        }
    }
    let bias = 3.0 * worst_gap;
    for (t, u, est, predicted) in rows {
        report.push(ReportRow::complex(
            format!("cf t={t} u={u}"),
            predicted,
            est.estimate,
            3.0 * est.stderr + bias,
        ));
    }
    report.extra.insert("bias_budget".into(), json!(bias));
    report
        .extra
        .insert("bias_constant".into(), json!(bias / mc.dt));
    report.extra.insert("budget_retries".into(), json!(retries));
    Ok(report)
}

/// Gronwall bound on `E[x(t)]` for the catalyst equation.
pub fn gronwall_bound(params: &AdmissibleParams, x0: f64, t: f64) -> Result<f64, MeasureError> {
    let m_l1 = params.m().moment(MomentKind::L1Xi1)?;
    let beta_bar = params.beta11().abs();
    Ok((x0 + t * params.b()[0] + m_l1 * t) * (t * beta_bar).exp())
}

/// Empirical first moments against the closed forms, plus the one-sided
/// Gronwall bound on `E[x(t)]`.
pub fn check_moments(
    params: &AdmissibleParams,
    x0: f64,
    z0: f64,
    t_list: &[f64],
    mc: &MonteCarlo,
) -> Result<ExperimentReport, ValidateError> {
    mc.check()?;
    let (samples, retries) = affine_samples(params, x0, z0, t_list, mc)?;
    let mut inputs = base_inputs(params, mc);
    inputs.insert("x0".into(), json!([x0, z0]));
    inputs.insert("t_list".into(), json!(t_list));
    let mut report = ExperimentReport::new("moments", Value::Object(inputs));
    let mf = transform::moment_functionals(params);

    // Per component: (t, mean, stderr, predicted) and the worst dt/2 gap.
    let mut stats = [Vec::new(), Vec::new()];
    let mut gaps = [0.0f64; 2];
    for (j, &t) in t_list.iter().enumerate() {
        for c in 0..2 {
            let coarse: Vec<f64> = samples.iter().map(|s| s.0[j][c]).collect();
            let fine: Vec<f64> = samples.iter().map(|s| s.1[j][c]).collect();
            let (m, se) = mean_stderr(&coarse);
            let (mf_, _) = mean_stderr(&fine);
            gaps[c] = gaps[c].max((m - mf_).abs());
            let predicted = if c == 0 {
                mf.mean_x(x0, t)
            } else {
                mf.mean_z(x0, z0, t)
            };
            stats[c].push((t, m, se, predicted));
        }
    }
    for (c, name) in ["E[x]", "E[z]"].iter().enumerate() {
        for &(t, m, se, p) in &stats[c] {
            report.push(ReportRow::two_sided(
                format!("{name} t={t}"),
                p,
                m,
                3.0 * se + 3.0 * gaps[c],
            ));
        }
    }
    for &(t, m, se, _) in &stats[0] {
        report.push(ReportRow::upper_bound(
            format!("E[x] <= gronwall t={t}"),
            gronwall_bound(params, x0, t)?,
            m,
            3.0 * se + 3.0 * gaps[0],
        ));
    }
    report
        .extra
        .insert("bias_budget".into(), json!(gaps.map(|g| 3.0 * g)));
    report.extra.insert("budget_retries".into(), json!(retries));
    Ok(report)
}

/// Test functions for the generator checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TestFunction {
    One,
    X1,
    X2,
    X1Sq,
    X2Sq,
    X1X2,
    /// `e^{−x1}`
    ExpNegX1,
    /// `e^{−x1 + i x2}`, checked through its real and imaginary parts.
    ExpNegX1IX2,
}

impl TestFunction {
    pub const CATALOG: [TestFunction; 8] = [
        TestFunction::One,
        TestFunction::X1,
        TestFunction::X2,
        TestFunction::X1Sq,
        TestFunction::X2Sq,
        TestFunction::X1X2,
        TestFunction::ExpNegX1,
        TestFunction::ExpNegX1IX2,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TestFunction::One => "1",
            TestFunction::X1 => "x1",
            TestFunction::X2 => "x2",
            TestFunction::X1Sq => "x1^2",
            TestFunction::X2Sq => "x2^2",
            TestFunction::X1X2 => "x1*x2",
            TestFunction::ExpNegX1 => "exp(-x1)",
            TestFunction::ExpNegX1IX2 => "exp(-x1+i*x2)",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::CATALOG.into_iter().find(|f| f.name() == name)
    }

    pub fn is_complex(self) -> bool {
        self == TestFunction::ExpNegX1IX2
    }

    fn exponent(self) -> Option<[Complex64; 2]> {
        match self {
            TestFunction::ExpNegX1 => Some([Complex64::new(-1.0, 0.0), Complex64::new(0.0, 0.0)]),
            TestFunction::ExpNegX1IX2 => {
                Some([Complex64::new(-1.0, 0.0), Complex64::new(0.0, 1.0)])
            }
            _ => None,
        }
    }

    pub fn eval(self, x: [f64; 2]) -> Complex64 {
        let r = |v: f64| Complex64::new(v, 0.0);
        match self {
            TestFunction::One => r(1.0),
            TestFunction::X1 => r(x[0]),
            TestFunction::X2 => r(x[1]),
            TestFunction::X1Sq => r(x[0] * x[0]),
            TestFunction::X2Sq => r(x[1] * x[1]),
            TestFunction::X1X2 => r(x[0] * x[1]),
            TestFunction::ExpNegX1 | TestFunction::ExpNegX1IX2 => {
                let w = self.exponent().expect("exponential");
                (w[0] * x[0] + w[1] * x[1]).exp()
            }
        }
    }

    /// Gradient and Hessian at `x`.
    fn derivatives(self, x: [f64; 2]) -> ([Complex64; 2], [[Complex64; 2]; 2]) {
        let z = Complex64::new(0.0, 0.0);
        let r = |v: f64| Complex64::new(v, 0.0);
        match self {
            TestFunction::One => ([z, z], [[z, z], [z, z]]),
            TestFunction::X1 => ([r(1.0), z], [[z, z], [z, z]]),
            TestFunction::X2 => ([z, r(1.0)], [[z, z], [z, z]]),
            TestFunction::X1Sq => ([r(2.0 * x[0]), z], [[r(2.0), z], [z, z]]),
            TestFunction::X2Sq => ([z, r(2.0 * x[1])], [[z, z], [z, r(2.0)]]),
            TestFunction::X1X2 => ([r(x[1]), r(x[0])], [[z, r(1.0)], [r(1.0), z]]),
            TestFunction::ExpNegX1 | TestFunction::ExpNegX1IX2 => {
                let w = self.exponent().expect("exponential");
                let f = self.eval(x);
                (
                    [w[0] * f, w[1] * f],
                    [
                        [w[0] * w[0] * f, w[0] * w[1] * f],
                        [w[1] * w[0] * f, w[1] * w[1] * f],
                    ],
                )
            }
        }
    }

    /// `∫_region [f(x + Pξ) − f(x) − Σ_{i compensated} ∂_i f(x) (Pξ)_i] ν(dξ)`
    /// where `P` keeps the coordinates flagged in `shift`.
    fn jump_term(
        self,
        x: [f64; 2],
        nu: &JumpMeasure,
        region: Region,
        shift: [bool; 2],
        compensate: [bool; 2],
    ) -> Result<Complex64, ValidateError> {
        let nu = nu.restrict(region);
        if nu.is_empty() {
            return Ok(Complex64::new(0.0, 0.0));
        }
        let comp = [compensate[0] && shift[0], compensate[1] && shift[1]];
        if let Some(w) = self.exponent() {
            let u1 = if shift[0] {
                w[0]
            } else {
                Complex64::new(0.0, 0.0)
            };
            let u2 = if shift[1] {
                w[1]
            } else {
                Complex64::new(0.0, 0.0)
            };
            let kind = match comp {
                [false, false] => Compensation::None,
                [false, true] => Compensation::Xi2Only,
                [true, true] => Compensation::Full,
                // Only the first coordinate moves, so full compensation subtracts exactly `u1 ξ1`.
                [true, false] if !shift[1] => Compensation::Full,
                [true, false] => {
                    return Err(ValidateError::BadInput(
                        "compensating xi1 alone while shifting xi2".into(),
                    ))
                }
            };
            return Ok(self.eval(x) * nu.exp_integral(u1, u2, kind)?);
        }
        // Polynomials of degree <= 2: f(x + s) − f(x) = ∇f·s + s'Hs/2.
        let (g, h) = self.derivatives(x);
        let first = [MomentKind::Xi1, MomentKind::Xi2];
        let mut out = Complex64::new(0.0, 0.0);
        for i in 0..2 {
            if shift[i] && !comp[i] && g[i] != Complex64::new(0.0, 0.0) {
                out += g[i] * nu.moment(first[i])?;
            }
        }
        let second = [
            [MomentKind::Xi1Sq, MomentKind::Xi1Xi2],
            [MomentKind::Xi1Xi2, MomentKind::Xi2Sq],
        ];
        for i in 0..2 {
            for j in 0..2 {
                if shift[i] && shift[j] && h[i][j] != Complex64::new(0.0, 0.0) {
                    out += 0.5 * h[i][j] * nu.moment(second[i][j])?;
                }
            }
        }
        Ok(out)
    }
}

/// Which generator a check confronts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum GeneratorKind {
    /// The affine pair `(x, z)`.
    Affine,
    /// The catalyst alone as a one-dimensional CBI-process, embedded as `(x, 0)`.
    Cbi,
    /// The catalytic pair `(x, y)` with reactant branching rate `l`.
    Catalytic { l: f64 },
}

/// Closed-form generator applied to `f` at `x`.
pub fn generator_value(
    params: &AdmissibleParams,
    kind: GeneratorKind,
    f: TestFunction,
    x: [f64; 2],
) -> Result<Complex64, ValidateError> {
    let al = params.alpha();
    let (b, a) = (params.b(), params.a());
    let (m, mu) = (params.m(), params.mu());
    let both = [true, true];
    let first = [true, false];
    let second = [false, true];
    let none = [false, false];
    match kind {
        GeneratorKind::Affine => {
            let (g, h) = f.derivatives(x);
            Ok(al[0][0] * x[0] * h[0][0]
                + 2.0 * al[0][1] * x[0] * h[0][1]
                + al[1][1] * x[0] * h[1][1]
                + a * h[1][1]
                + (b[0] + params.beta11() * x[0]) * g[0]
                + (b[1] + params.beta21() * x[0] + params.beta22() * x[1]) * g[1]
                + f.jump_term(x, m, Region::All, both, second)?
                + x[0] * f.jump_term(x, mu, Region::All, both, both)?)
        }
        GeneratorKind::Cbi => {
            let x = [x[0], 0.0];
            let (g, h) = f.derivatives(x);
            Ok(al[0][0] * x[0] * h[0][0]
                + (b[0] + params.beta11() * x[0]) * g[0]
                + f.jump_term(x, m, Region::All, first, none)?
                + x[0] * f.jump_term(x, mu, Region::All, first, first)?)
        }
        GeneratorKind::Catalytic { l } => {
            let (g, h) = f.derivatives(x);
            let lxy = l * x[0] * x[1];
            let both_rate = x[0].min(lxy);
            Ok(al[0][0] * x[0] * h[0][0]
                + 2.0 * al[0][1] * x[0] * x[1].sqrt() * h[0][1]
                + al[1][1] * x[0] * x[1] * h[1][1]
                + a * x[1] * h[1][1]
                + (b[0] + params.beta11() * x[0]) * g[0]
                + (b[1] + params.beta21() * x[0] * x[1] + params.beta22() * x[1]) * g[1]
                + f.jump_term(x, m, Region::Upper, both, none)?
                + f.jump_term(x, m, Region::Lower, first, none)?
                + both_rate * f.jump_term(x, mu, Region::Upper, both, both)?
                + (x[0] - both_rate) * f.jump_term(x, mu, Region::Upper, first, first)?
                + (lxy - both_rate) * f.jump_term(x, mu, Region::Upper, second, second)?
                + x[0] * f.jump_term(x, mu, Region::Lower, first, first)?)
        }
    }
}

fn cbi_spec(params: &AdmissibleParams) -> Result<GeneratorSpec, ValidateError> {
    let s = params.sigma();
    Ok(GeneratorSpec::Cbi(GeneralizedCbiSpec::constant(
        1.0,
        1.0,
        vec![s[0][0], s[0][1]],
        params.b()[0],
        params.beta11(),
        1.0,
        params.m().clone(),
        params.mu().clone(),
    )?))
}

type Part = (&'static str, fn(Complex64) -> f64);

enum GeneratorSpec {
    Scheme(AffineScheme),
    Cbi(GeneralizedCbiSpec),
}

/// Short-horizon check `(E f(X(Δ)) − f(x)) / Δ ≈ Lf(x)` for each function in
/// `funcs`, all estimated from one ensemble. The bias budget per row comes
/// from a control run with two steps of `Δ/2` on the refined noise.
pub fn check_generator_catalog(
    params: &AdmissibleParams,
    state: [f64; 2],
    funcs: &[TestFunction],
    delta_t: f64,
    mc: &MonteCarlo,
    kind: GeneratorKind,
) -> Result<ExperimentReport, ValidateError> {
    mc.check()?;
    if !(delta_t > 0.0) || !delta_t.is_finite() {
        return Err(ValidateError::BadInput(format!(
            "delta_t must be > 0, got {delta_t}"
        )));
    }
    let rate = params.beta11().abs().max(params.beta22().abs());
    if delta_t * rate > STABILITY_MARGIN {
        return Err(SdeError::Unstable { dt: delta_t, rate }.into());
    }
    let state = match kind {
        GeneratorKind::Cbi => [state[0], 0.0],
        _ => state,
    };
    if !(state[0] >= 0.0) || matches!(kind, GeneratorKind::Catalytic { .. }) && !(state[1] >= 0.0) {
        return Err(ValidateError::BadInput(format!(
            "state {state:?} outside the state space"
        )));
    }
    let grid = grid_for(delta_t, delta_t)?;
    let generator = NoiseGenerator::new(params.m(), params.mu(), grid, 3, mc.u_bound, mc.eps)?;
    let spec = match kind {
        GeneratorKind::Cbi => cbi_spec(params)?,
        _ => GeneratorSpec::Scheme(AffineScheme::new(params, mc.eps)?),
    };
    let end = |noise: &NoiseSystem| -> Result<[f64; 2], SdeError> {
        let b = match (&spec, kind) {
            (GeneratorSpec::Cbi(s), _) => sde::simulate_generalized_cbi(s, state[0], noise)?,
            (GeneratorSpec::Scheme(s), GeneratorKind::Catalytic { l }) => {
                s.simulate_catalytic(state[0], state[1], l, noise)?
            }
            (GeneratorSpec::Scheme(s), _) => s.simulate_affine(state[0], state[1], noise)?,
        };
        let last = |i: usize| {
            b.components
                .get(i)
                .map_or(0.0, |c| *c.1.last().expect("nonempty"))
        };
        Ok([last(0), last(1)])
    };
    let (ends, retries) = run_paths(mc, &generator, |noise| {
        Ok((end(noise)?, end(&noise.refine())?))
    })?;

    let mut inputs = base_inputs(params, mc);
    inputs.insert("state".into(), json!(state));
    inputs.insert("delta_t".into(), json!(delta_t));
    inputs.insert("kind".into(), json!(kind));
    inputs.insert("functions".into(), json!(funcs));
    let label = match kind {
        GeneratorKind::Affine => "affine",
        GeneratorKind::Cbi => "cbi",
        GeneratorKind::Catalytic { .. } => "catalytic",
    };
    let mut report = ExperimentReport::new(format!("generator_{label}"), Value::Object(inputs));
    for &f in funcs {
        let f0 = f.eval(state);
        let diffs: Vec<(Complex64, Complex64)> = ends
            .iter()
            .map(|(c, h)| ((f.eval(*c) - f0) / delta_t, (f.eval(*h) - f0) / delta_t))
            .collect();
        let predicted = generator_value(params, kind, f, state)?;
        let parts: &[Part] = if f.is_complex() {
            &[("re", |z| z.re), ("im", |z| z.im)]
        } else {
            &[("re", |z| z.re)]
        };
        for (part, take) in parts {
            let coarse: Vec<f64> = diffs.iter().map(|d| take(d.0)).collect();
            let fine: Vec<f64> = diffs.iter().map(|d| take(d.1)).collect();
            let (m, se) = mean_stderr(&coarse);
            let (mf, _) = mean_stderr(&fine);
            let name = if f.is_complex() {
                format!("L[{}].{part} at {state:?}", f.name())
            } else {
                format!("L[{}] at {state:?}", f.name())
            };
            report.push(ReportRow::two_sided(
                name,
                take(predicted),
                m,
                3.0 * se + 3.0 * (m - mf).abs(),
            ));
        }
    }
    report.extra.insert("budget_retries".into(), json!(retries));
    Ok(report)
}

/// Single-function form of [`check_generator_catalog`].
pub fn check_generator(
    params: &AdmissibleParams,
    state: [f64; 2],
    f: TestFunction,
    delta_t: f64,
    mc: &MonteCarlo,
    kind: GeneratorKind,
) -> Result<ExperimentReport, ValidateError> {
    check_generator_catalog(params, state, &[f], delta_t, mc, kind)
}

/// Pathwise uniqueness and `L¹` contraction of the catalyst equation under
/// shared noise.
pub fn uniqueness_experiment(
    params: &AdmissibleParams,
    x0_a: f64,
    x0_b: f64,
    t_max: f64,
    mc: &MonteCarlo,
) -> Result<ExperimentReport, ValidateError> {
    mc.check()?;
    if !(x0_a >= 0.0 && x0_b >= 0.0) {
        return Err(ValidateError::BadInput(
            "initial values must be >= 0".into(),
        ));
    }
    let grid = grid_for(t_max, mc.dt)?;
    let n = grid.n_steps();
    if n % 4 != 0 {
        return Err(ValidateError::BadInput(
            "t_max/dt must be a multiple of 4".into(),
        ));
    }
    let checks: Vec<usize> = (1..=4).map(|q| q * n / 4).collect();
    let scheme = AffineScheme::new(params, mc.eps)?;
    let generator = NoiseGenerator::new(params.m(), params.mu(), grid, 3, mc.u_bound, mc.eps)?;
    let (out, retries) = run_paths(mc, &generator, |noise| {
        let a = scheme.simulate_affine(x0_a, 0.0, noise)?;
        let a2 = scheme.simulate_affine(x0_a, 0.0, noise)?;
        let b = scheme.simulate_affine(x0_b, 0.0, noise)?;
        let fine = noise.refine();
        let fa = scheme.simulate_affine(x0_a, 0.0, &fine)?;
        let fb = scheme.simulate_affine(x0_b, 0.0, &fine)?;
        let (xa, xb) = (a.component("x").unwrap(), b.component("x").unwrap());
        let (ya, yb) = (fa.component("x").unwrap(), fb.component("x").unwrap());
        let coarse: Vec<f64> = checks.iter().map(|&k| (xb[k] - xa[k]).abs()).collect();
        let refined: Vec<f64> = checks
            .iter()
            .map(|&k| (yb[2 * k] - ya[2 * k]).abs())
            .collect();
        Ok((a == a2, coarse, refined))
    })?;

    let mut inputs = base_inputs(params, mc);
    inputs.insert("x0".into(), json!([x0_a, x0_b]));
    inputs.insert("t_max".into(), json!(t_max));
    let mut report = ExperimentReport::new("uniqueness", Value::Object(inputs));
    let mismatches = out.iter().filter(|o| !o.0).count();
    report.push(ReportRow::two_sided(
        "paths not bitwise equal (same init)",
        0.0,
        mismatches as f64,
        0.0,
    ));
    let gap0 = (x0_b - x0_a).abs();
    for (j, &k) in checks.iter().enumerate() {
        let t = grid.time(k);
        let coarse: Vec<f64> = out.iter().map(|o| o.1[j]).collect();
        let fine: Vec<f64> = out.iter().map(|o| o.2[j]).collect();
        let (m, se) = mean_stderr(&coarse);
        let (mf, _) = mean_stderr(&fine);
        let bound = gap0 * (t * params.beta11().abs()).exp();
        report.push(ReportRow::upper_bound(
            format!("E|x_b - x_a| t={t}"),
            bound,
            m,
            3.0 * se + 3.0 * (m - mf).abs(),
        ));
    }
    report.extra.insert("budget_retries".into(), json!(retries));
    Ok(report)
}

/// Sup-grid distances `e_θ` between the fluctuation system and its limit
/// along a ladder of `θ`, all driven by one noise per path.
pub fn fluctuation_distances(
    params: &AdmissibleParams,
    mode: ReactantMode,
    theta_ladder: &[f64],
    x0: f64,
    z0: [f64; 2],
    t_max: f64,
    mc: &MonteCarlo,
) -> Result<(Vec<f64>, usize), ValidateError> {
    mc.check()?;
    if !(params.beta22() < 0.0) {
        return Err(SdeError::NonNegativeBeta22(params.beta22()).into());
    }
    if theta_ladder.is_empty()
        || theta_ladder[0] < 1.0
        || theta_ladder.windows(2).any(|w| !(w[1] > w[0]))
    {
        return Err(ValidateError::BadInput(
            "theta ladder must be increasing and >= 1".into(),
        ));
    }
    if let ReactantMode::Pair(d) = mode {
        d.check(params)?;
    }
    let single = matches!(mode, ReactantMode::Single);
    let z_limit0 = if single { z0[0] } else { z0[0] - z0[1] };
    for &theta in theta_ladder {
        if theta + z0[0] < 0.0 || (!single && theta + z0[1] < 0.0) {
            return Err(ValidateError::BadInput(format!(
                "initial reactant theta + z0 < 0 at theta = {theta}"
            )));
        }
    }
    let grid = grid_for(t_max, mc.dt)?;
    let scheme = AffineScheme::new(params, mc.eps)?;
    let generator = NoiseGenerator::new(params.m(), params.mu(), grid, 3, mc.u_bound, mc.eps)?;
    let (dists, retries) = run_paths(mc, &generator, |noise| {
        let limit = scheme.simulate_limit(mode, x0, z_limit0, noise)?;
        let z = limit.component("z").expect("z component");
        theta_ladder
            .iter()
            .map(|&theta| {
                let y0 = [theta + z0[0], theta + z0[1]];
                let b = scheme.simulate_reactant(mode, theta, x0, y0, noise)?;
                let zk = b.component("z_k").expect("z_k component");
                Ok(zk
                    .iter()
                    .zip(z)
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max))
            })
            .collect::<Result<Vec<f64>, SdeError>>()
    })?;
    let e = (0..theta_ladder.len())
        .map(|j| dists.iter().map(|d| d[j]).sum::<f64>() / dists.len() as f64)
        .collect();
    Ok((e, retries))
}

/// Ordinal convergence check along the ladder: each rung at most 5% above
/// the previous one, and the last at most a quarter of the first.
pub fn fluctuation_experiment(
    params: &AdmissibleParams,
    mode: ReactantMode,
    theta_ladder: &[f64],
    x0: f64,
    z0: [f64; 2],
    t_max: f64,
    mc: &MonteCarlo,
) -> Result<ExperimentReport, ValidateError> {
    let (e, retries) = fluctuation_distances(params, mode, theta_ladder, x0, z0, t_max, mc)?;
    let mut inputs = base_inputs(params, mc);
    inputs.insert("theta_ladder".into(), json!(theta_ladder));
    inputs.insert("x0".into(), json!(x0));
    inputs.insert("z0".into(), json!(z0));
    inputs.insert("t_max".into(), json!(t_max));
    let mode_name = match mode {
        ReactantMode::Single => json!("single"),
        ReactantMode::Pair(d) => json!({ "pair": d }),
    };
    inputs.insert("mode".into(), mode_name);
    let mut report = ExperimentReport::new("fluctuation", Value::Object(inputs));
    for j in 1..e.len() {
        report.push(ReportRow::upper_bound(
            format!(
                "e[theta={}] <= 1.05 e[theta={}]",
                theta_ladder[j],
                theta_ladder[j - 1]
            ),
            1.05 * e[j - 1],
            e[j],
            0.0,
        ));
    }
    let last = theta_ladder.len() - 1;
    report.push(ReportRow::upper_bound(
        format!(
            "e[theta={}] <= e[theta={}]/4",
            theta_ladder[last], theta_ladder[0]
        ),
        e[0] / 4.0,
        e[last],
        0.0,
    ));
    report.extra.insert(
        "e_theta".into(),
        json!(theta_ladder
            .iter()
            .zip(&e)
            .map(|(t, v)| json!({"theta": t, "e": v}))
            .collect::<Vec<_>>()),
    );
    report.extra.insert("budget_retries".into(), json!(retries));
    Ok(report)
}

/// Rate check for noise-free fluctuation systems: `θ e_θ` constant along the
/// ladder within `rel_tol` of its value at the largest `θ`.
pub fn fluctuation_rate_check(
    params: &AdmissibleParams,
    mode: ReactantMode,
    theta_ladder: &[f64],
    x0: f64,
    z0: [f64; 2],
    t_max: f64,
    mc: &MonteCarlo,
    rel_tol: f64,
) -> Result<ExperimentReport, ValidateError> {
    let (e, _) = fluctuation_distances(params, mode, theta_ladder, x0, z0, t_max, mc)?;
    let mut inputs = base_inputs(params, mc);
    inputs.insert("theta_ladder".into(), json!(theta_ladder));
    inputs.insert("z0".into(), json!(z0));
    inputs.insert("rel_tol".into(), json!(rel_tol));
    let mut report = ExperimentReport::new("fluctuation_rate", Value::Object(inputs));
    let last = theta_ladder.len() - 1;
    let reference = theta_ladder[last] * e[last];
    for (theta, v) in theta_ladder.iter().zip(&e) {
        report.push(ReportRow::two_sided(
            format!("theta*e[theta={theta}]"),
            reference,
            theta * v,
            rel_tol * reference.abs(),
        ));
    }
    Ok(report)
}

/// Transform-level semigroup property: both flow residuals within `10 tol`.
pub fn sc_semigroup_check(
    params: &AdmissibleParams,
    r: f64,
    t: f64,
    u_list: &[UPoint],
    tol: f64,
) -> Result<ExperimentReport, ValidateError> {
    check_u_list(u_list)?;
    let inputs = json!({ "params": params, "r": r, "t": t, "u_list": u_list, "tol": tol });
    let mut report = ExperimentReport::new("sc_semigroup", inputs);
    for &u in u_list {
        let (psi, phi) = transform::flow_residual(params, u, r, t, tol)?;
        report.push(ReportRow::two_sided(
            format!("psi flow u={u} r={r} t={t}"),
            0.0,
            psi,
            10.0 * tol,
        ));
        report.push(ReportRow::two_sided(
            format!("phi flow u={u} r={r} t={t}"),
            0.0,
            phi,
            10.0 * tol,
        ));
    }
    Ok(report)
}
