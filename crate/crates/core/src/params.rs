//! Admissible parameter sets and the jump measures they carry.
//!
//! A model is the tuple `(a, alpha, b, beta, m, mu)` on the state space
//! `D = R+ x R`. `m` drives immigration jumps, `mu` drives the
//! state-dependent branching jumps. Both measures live on `D \ {0}`.

use std::fmt;

use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::quad;

/// Frequency point `(u1, u2)` in `U = C- x iR`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UPoint {
    pub u1: Complex64,
    pub u2: Complex64,
}

impl UPoint {
    pub fn new(u1: Complex64, u2: Complex64) -> Result<Self, DomainError> {
        if !(u1.re <= 0.0) || !u1.is_finite() {
            return Err(DomainError::PositiveRealPart(u1));
        }
        if u2.re != 0.0 || !u2.is_finite() {
            return Err(DomainError::NotImaginary(u2));
        }
        Ok(Self { u1, u2 })
    }

    /// `(u1, i * v2)` with real `u1 <= 0`.
    pub fn real_imag(u1: f64, v2: f64) -> Result<Self, DomainError> {
        Self::new(Complex64::new(u1, 0.0), Complex64::new(0.0, v2))
    }

    pub fn zero() -> Self {
        Self {
            u1: Complex64::new(0.0, 0.0),
            u2: Complex64::new(0.0, 0.0),
        }
    }

    pub fn conj(&self) -> Self {
        Self {
            u1: self.u1.conj(),
            u2: self.u2.conj(),
        }
    }
}

impl fmt::Display for UPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "({}{:+}i, {}{:+}i)",
            self.u1.re, self.u1.im, self.u2.re, self.u2.im
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Error)]
pub enum DomainError {
    #[error("Re(u1) must be <= 0, got {0}")]
    PositiveRealPart(Complex64),
    #[error("u2 must be purely imaginary, got {0}")]
    NotImaginary(Complex64),
}

/// Sub-region of `D` used when only part of a measure acts on a component.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Region {
    All,
    /// `D+ = R+ x R+`, i.e. `xi2 >= 0`.
    Upper,
    /// `xi2 < 0`. The boundary `xi2 = 0` belongs to [`Region::Upper`] so the
    /// two halves partition `D`.
    Lower,
}

impl Region {
    pub fn contains(self, xi: [f64; 2]) -> bool {
        match self {
            Region::All => true,
            Region::Upper => xi[1] >= 0.0,
            Region::Lower => xi[1] < 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Atom {
    pub xi: [f64; 2],
    pub weight: f64,
}

/// Lévy measure on `D`.
///
/// `truncation_eps` is only consulted by samplers; every moment and
/// exponential integral covers the whole measure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum JumpMeasure {
    FiniteAtomic {
        atoms: Vec<Atom>,
        #[serde(default)]
        truncation_eps: f64,
    },
    /// `total_rate * Exp(rate1)(dxi1) * TwoSidedExp(rate2, sign_mix)(dxi2)`,
    /// where `sign_mix` is the probability of a positive `xi2`.
    ProductExponential {
        total_rate: f64,
        rate1: f64,
        rate2: f64,
        sign_mix: f64,
        #[serde(default)]
        truncation_eps: f64,
    },
}

impl Default for JumpMeasure {
    fn default() -> Self {
        Self::empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MomentKind {
    /// `∫ |xi1| dν`
    L1Xi1,
    /// `∫ |xi1| ∧ |xi1|^2 dν`
    L12Xi1,
    /// `∫ |xi2| ∧ |xi2|^2 dν`
    L12Xi2,
    Xi1,
    Xi2,
    Xi1Sq,
    Xi2Sq,
    Xi1Xi2,
    /// `ν({|xi| > eps})`, Euclidean norm.
    TotalMassOutside(f64),
}

/// Which linear terms are subtracted inside `∫ (e^{<u,xi>} - 1 - C) dν`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Compensation {
    None,
    Xi2Only,
    Full,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MeasureError {
    #[error("atom {index} at ({x1}, {x2}) lies outside D \\ {{0}}", x1 = .xi[0], x2 = .xi[1])]
    AtomOutsideDomain { index: usize, xi: [f64; 2] },
    #[error("atom {index} has non-positive or non-finite weight {weight}")]
    BadWeight { index: usize, weight: f64 },
    #[error("invalid product-exponential parameter {name} = {value}")]
    BadDensityParameter { name: &'static str, value: f64 },
    #[error("truncation eps must be finite and >= 0, got {0}")]
    BadTruncation(f64),
    #[error("scale factor must be finite and > 0, got {0}")]
    BadScale(f64),
    #[error("quadrature did not converge (estimate {estimate:e}, error {error:e})")]
    Quadrature { estimate: f64, error: f64 },
}

impl From<quad::QuadFailure> for MeasureError {
    fn from(q: quad::QuadFailure) -> Self {
        MeasureError::Quadrature {
            estimate: q.estimate,
            error: q.error,
        }
    }
}

const QUAD_REL_TOL: f64 = 1e-10;
// e^{-50} relative tail is far below the quadrature tolerance.
const TAIL_SPAN: f64 = 50.0;

/// Mass and first moments of a measure restricted to `{|xi| > eps} ∩ region`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BandMoments {
    pub mass: f64,
    pub mean: [f64; 2],
}

impl JumpMeasure {
    pub fn empty() -> Self {
        JumpMeasure::FiniteAtomic {
            atoms: Vec::new(),
            truncation_eps: 0.0,
        }
    }

    pub fn atomic<I: IntoIterator<Item = ([f64; 2], f64)>>(atoms: I) -> Result<Self, MeasureError> {
        let m = JumpMeasure::FiniteAtomic {
            atoms: atoms
                .into_iter()
                .map(|(xi, weight)| Atom { xi, weight })
                .collect(),
            truncation_eps: 0.0,
        };
        m.check()?;
        Ok(m)
    }

    pub fn product_exponential(
        total_rate: f64,
        rate1: f64,
        rate2: f64,
        sign_mix: f64,
    ) -> Result<Self, MeasureError> {
        let m = JumpMeasure::ProductExponential {
            total_rate,
            rate1,
            rate2,
            sign_mix,
            truncation_eps: 0.0,
        };
        m.check()?;
        Ok(m)
    }

    pub fn with_truncation(mut self, eps: f64) -> Result<Self, MeasureError> {
        match &mut self {
            JumpMeasure::FiniteAtomic { truncation_eps, .. }
            | JumpMeasure::ProductExponential { truncation_eps, .. } => *truncation_eps = eps,
        }
        self.check()?;
        Ok(self)
    }

    pub fn truncation_eps(&self) -> f64 {
        match self {
            JumpMeasure::FiniteAtomic { truncation_eps, .. }
            | JumpMeasure::ProductExponential { truncation_eps, .. } => *truncation_eps,
        }
    }

    pub fn is_empty(&self) -> bool {
        match self {
            JumpMeasure::FiniteAtomic { atoms, .. } => atoms.is_empty(),
            JumpMeasure::ProductExponential { .. } => false,
        }
    }

    /// Structural well-formedness: support in `D \ {0}`, positive weights and rates.
    pub fn check(&self) -> Result<(), MeasureError> {
        let eps = self.truncation_eps();
        if !(eps >= 0.0) || !eps.is_finite() {
            return Err(MeasureError::BadTruncation(eps));
        }
        match self {
            JumpMeasure::FiniteAtomic { atoms, .. } => {
                for (index, a) in atoms.iter().enumerate() {
                    let [x1, x2] = a.xi;
                    if !x1.is_finite() || !x2.is_finite() || x1 < 0.0 || (x1 == 0.0 && x2 == 0.0) {
                        return Err(MeasureError::AtomOutsideDomain { index, xi: a.xi });
                    }
                    if !(a.weight > 0.0) || !a.weight.is_finite() {
                        return Err(MeasureError::BadWeight {
                            index,
                            weight: a.weight,
                        });
                    }
                }
            }
            &JumpMeasure::ProductExponential {
                total_rate,
                rate1,
                rate2,
                sign_mix,
                ..
            } => {
                for (name, value) in [
                    ("total_rate", total_rate),
                    ("rate1", rate1),
                    ("rate2", rate2),
                ] {
                    if !(value > 0.0) || !value.is_finite() {
                        return Err(MeasureError::BadDensityParameter { name, value });
                    }
                }
                if !(0.0..=1.0).contains(&sign_mix) {
                    return Err(MeasureError::BadDensityParameter {
                        name: "sign_mix",
                        value: sign_mix,
                    });
                }
            }
        }
        Ok(())
    }

    /// Restriction of the measure to a sub-region of `D`.
    pub fn restrict(&self, region: Region) -> JumpMeasure {
        match (self, region) {
            (_, Region::All) => self.clone(),
            (
                JumpMeasure::FiniteAtomic {
                    atoms,
                    truncation_eps,
                },
                _,
            ) => JumpMeasure::FiniteAtomic {
                atoms: atoms
                    .iter()
                    .copied()
                    .filter(|a| region.contains(a.xi))
                    .collect(),
                truncation_eps: *truncation_eps,
            },
            (
                &JumpMeasure::ProductExponential {
                    total_rate,
                    rate1,
                    rate2,
                    sign_mix,
                    truncation_eps,
                },
                _,
            ) => {
                let (share, mix) = match region {
                    Region::Upper => (sign_mix, 1.0),
                    _ => (1.0 - sign_mix, 0.0),
                };
                if share == 0.0 {
                    JumpMeasure::FiniteAtomic {
                        atoms: Vec::new(),
                        truncation_eps,
                    }
                } else {
                    JumpMeasure::ProductExponential {
                        total_rate: total_rate * share,
                        rate1,
                        rate2,
                        sign_mix: mix,
                        truncation_eps,
                    }
                }
            }
        }
    }

    /// Image of the measure under `xi -> factor * xi`.
    pub fn scaled(&self, factor: f64) -> Result<JumpMeasure, MeasureError> {
        if !(factor > 0.0) || !factor.is_finite() {
            return Err(MeasureError::BadScale(factor));
        }
        Ok(match self {
            JumpMeasure::FiniteAtomic {
                atoms,
                truncation_eps,
            } => JumpMeasure::FiniteAtomic {
                atoms: atoms
                    .iter()
                    .map(|a| Atom {
                        xi: [a.xi[0] * factor, a.xi[1] * factor],
                        weight: a.weight,
                    })
                    .collect(),
                truncation_eps: *truncation_eps,
            },
            &JumpMeasure::ProductExponential {
                total_rate,
                rate1,
                rate2,
                sign_mix,
                truncation_eps,
            } => JumpMeasure::ProductExponential {
                total_rate,
                rate1: rate1 / factor,
                rate2: rate2 / factor,
                sign_mix,
                truncation_eps,
            },
        })
    }

    pub fn moment(&self, kind: MomentKind) -> Result<f64, MeasureError> {
        match self {
            JumpMeasure::FiniteAtomic { atoms, .. } => {
                let f = |xi: [f64; 2]| -> f64 {
                    let [x1, x2] = xi;
                    match kind {
                        MomentKind::L1Xi1 => x1.abs(),
                        MomentKind::L12Xi1 => l12(x1),
                        MomentKind::L12Xi2 => l12(x2),
                        MomentKind::Xi1 => x1,
                        MomentKind::Xi2 => x2,
                        MomentKind::Xi1Sq => x1 * x1,
                        MomentKind::Xi2Sq => x2 * x2,
                        MomentKind::Xi1Xi2 => x1 * x2,
                        MomentKind::TotalMassOutside(eps) => {
                            if x1.hypot(x2) > eps {
                                1.0
                            } else {
                                0.0
                            }
                        }
                    }
                };
                Ok(atoms.iter().map(|a| a.weight * f(a.xi)).sum())
            }
            &JumpMeasure::ProductExponential {
                total_rate,
                rate1,
                rate2,
                sign_mix,
                ..
            } => {
                let skew = 2.0 * sign_mix - 1.0;
                Ok(match kind {
                    MomentKind::L1Xi1 | MomentKind::Xi1 => total_rate / rate1,
                    MomentKind::L12Xi1 => total_rate * exp_l12(rate1),
                    MomentKind::L12Xi2 => total_rate * exp_l12(rate2),
                    MomentKind::Xi2 => total_rate * skew / rate2,
                    MomentKind::Xi1Sq => total_rate * 2.0 / (rate1 * rate1),
                    MomentKind::Xi2Sq => total_rate * 2.0 / (rate2 * rate2),
                    MomentKind::Xi1Xi2 => total_rate * skew / (rate1 * rate2),
                    MomentKind::TotalMassOutside(eps) => self.band_moments(eps, Region::All)?.mass,
                })
            }
        }
    }

    /// `∫ (e^{<u,xi>} - 1 - C(u, xi)) ν(dxi)` for complex `u`.
    ///
    /// `u` is not required to lie in `U`; the transform solver evaluates
    /// intermediate Runge–Kutta stages that may leave it by roundoff.
    pub fn exp_integral(
        &self,
        u1: Complex64,
        u2: Complex64,
        compensation: Compensation,
    ) -> Result<Complex64, MeasureError> {
        match self {
            JumpMeasure::FiniteAtomic { atoms, .. } => {
                let mut acc = Complex64::new(0.0, 0.0);
                for a in atoms {
                    let lin1 = u1 * a.xi[0];
                    let lin2 = u2 * a.xi[1];
                    let g = quad::exp_m1_m(lin1 + lin2);
                    let v = match compensation {
                        Compensation::Full => g,
                        Compensation::Xi2Only => g + lin1,
                        Compensation::None => g + lin1 + lin2,
                    };
                    acc += v * a.weight;
                }
                Ok(acc)
            }
            &JumpMeasure::ProductExponential {
                total_rate,
                rate1,
                rate2,
                sign_mix,
                ..
            } => {
                let e1 = |g: &dyn Fn(f64) -> Complex64| {
                    quad::integrate(
                        |x| g(x) * rate1 * (-rate1 * x).exp(),
                        0.0,
                        TAIL_SPAN / rate1,
                        QUAD_REL_TOL,
                        1e-300,
                    )
                };
                let e2 = |g: &dyn Fn(f64) -> Complex64| -> Result<Complex64, quad::QuadFailure> {
                    let up = if sign_mix > 0.0 {
                        quad::integrate(
                            |y| g(y) * rate2 * (-rate2 * y).exp(),
                            0.0,
                            TAIL_SPAN / rate2,
                            QUAD_REL_TOL,
                            1e-300,
                        )?
                    } else {
                        Complex64::new(0.0, 0.0)
                    };
                    let down = if sign_mix < 1.0 {
                        quad::integrate(
                            |y| g(-y) * rate2 * (-rate2 * y).exp(),
                            0.0,
                            TAIL_SPAN / rate2,
                            QUAD_REL_TOL,
                            1e-300,
                        )?
                    } else {
                        Complex64::new(0.0, 0.0)
                    };
                    Ok(up * sign_mix + down * (1.0 - sign_mix))
                };
                // e^{a+b} - 1 - a - b = (e^a - 1 - a) e^b + a (e^b - 1) + (e^b - 1 - b)
                let a_part = e1(&|x| quad::exp_m1_m(u1 * x))?;
                let mean_a = u1 / rate1;
                let b_m1 = e2(&|y| quad::exp_m1(u2 * y))?;
                let b_m1m = e2(&|y| quad::exp_m1_m(u2 * y))?;
                let mean_b = u2 * (2.0 * sign_mix - 1.0) / rate2;
                let full = a_part * (b_m1 + 1.0) + mean_a * b_m1 + b_m1m;
                let v = match compensation {
                    Compensation::Full => full,
                    Compensation::Xi2Only => full + mean_a,
                    Compensation::None => full + mean_a + mean_b,
                };
                Ok(v * total_rate)
            }
        }
    }

    /// Mass and first moments of the restriction to `{|xi| > eps} ∩ region`.
    pub fn band_moments(&self, eps: f64, region: Region) -> Result<BandMoments, MeasureError> {
        match self {
            JumpMeasure::FiniteAtomic { atoms, .. } => {
                let mut out = BandMoments::default();
                for a in atoms
                    .iter()
                    .filter(|a| region.contains(a.xi) && a.xi[0].hypot(a.xi[1]) > eps)
                {
                    out.mass += a.weight;
                    out.mean[0] += a.weight * a.xi[0];
                    out.mean[1] += a.weight * a.xi[1];
                }
                Ok(out)
            }
            JumpMeasure::ProductExponential { .. } if region != Region::All => {
                self.restrict(region).band_moments(eps, Region::All)
            }
            &JumpMeasure::ProductExponential {
                total_rate,
                rate1,
                rate2,
                sign_mix,
                ..
            } => {
                let skew = 2.0 * sign_mix - 1.0;
                let mut out = BandMoments {
                    mass: total_rate,
                    mean: [total_rate / rate1, total_rate * skew / rate2],
                };
                if eps > 0.0 {
                    // Subtract the small quarter/half disk {xi1 >= 0, |xi| <= eps}.
                    let inner = |x1: f64| -> [f64; 3] {
                        let r = (eps * eps - x1 * x1).max(0.0).sqrt();
                        let decay = (-rate2 * r).exp();
                        let p_abs = -(-rate2 * r).exp_m1();
                        let m_abs = (p_abs - decay * rate2 * r) / rate2;
                        [p_abs, x1 * p_abs, skew * m_abs]
                    };
                    let density = |x1: f64| rate1 * (-rate1 * x1).exp();
                    let mut removed = [0.0; 3];
                    for (k, slot) in removed.iter_mut().enumerate() {
                        *slot = quad::integrate_real(
                            |x1| density(x1) * inner(x1)[k],
                            0.0,
                            eps,
                            1e-12,
                            1e-300,
                        )?;
                    }
                    out.mass -= total_rate * removed[0];
                    out.mean[0] -= total_rate * removed[1];
                    out.mean[1] -= total_rate * removed[2];
                }
                Ok(out)
            }
        }
    }

    /// Sampler for the normalized restriction to `{|xi| > eps}`.
    pub fn mark_sampler(&self, eps: f64) -> Result<MarkSampler, MeasureError> {
        let mass = self.band_moments(eps, Region::All)?.mass;
        let kind = match self {
            JumpMeasure::FiniteAtomic { atoms, .. } => {
                let kept: Vec<Atom> = atoms
                    .iter()
                    .copied()
                    .filter(|a| a.xi[0].hypot(a.xi[1]) > eps)
                    .collect();
                let mut cumulative = Vec::with_capacity(kept.len());
                let mut acc = 0.0;
                for a in &kept {
                    acc += a.weight;
                    cumulative.push(acc);
                }
                SamplerKind::Atoms {
                    points: kept.iter().map(|a| a.xi).collect(),
                    cumulative,
                }
            }
            &JumpMeasure::ProductExponential {
                rate1,
                rate2,
                sign_mix,
                ..
            } => SamplerKind::Product {
                exp1: Exp::new(rate1).map_err(|_| MeasureError::BadDensityParameter {
                    name: "rate1",
                    value: rate1,
                })?,
                exp2: Exp::new(rate2).map_err(|_| MeasureError::BadDensityParameter {
                    name: "rate2",
                    value: rate2,
                })?,
                sign_mix,
            },
        };
        Ok(MarkSampler { mass, eps, kind })
    }
}

fn l12(x: f64) -> f64 {
    let a = x.abs();
    a.min(a * a)
}

/// `∫_0^∞ (x ∧ x^2) λ e^{-λx} dx`
fn exp_l12(rate: f64) -> f64 {
    let decay = (-rate).exp();
    2.0 * (1.0 - decay * (1.0 + rate)) / (rate * rate) + decay / rate
}

#[derive(Debug, Clone)]
enum SamplerKind {
    Atoms {
        points: Vec<[f64; 2]>,
        cumulative: Vec<f64>,
    },
    Product {
        exp1: Exp<f64>,
        exp2: Exp<f64>,
        sign_mix: f64,
    },
}

/// Draws jump marks from a measure restricted to `{|xi| > eps}`, normalized.
#[derive(Debug, Clone)]
pub struct MarkSampler {
    mass: f64,
    eps: f64,
    kind: SamplerKind,
}

impl MarkSampler {
    /// Mass of the restricted measure (the Poisson event rate per unit time
    /// and per unit of auxiliary mark).
    pub fn mass(&self) -> f64 {
        self.mass
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> [f64; 2] {
        match &self.kind {
            SamplerKind::Atoms { points, cumulative } => {
                let total = *cumulative.last().expect("sampler with zero mass");
                let target = rng.random::<f64>() * total;
                let idx = cumulative
                    .partition_point(|&c| c <= target)
                    .min(points.len() - 1);
                points[idx]
            }
            SamplerKind::Product {
                exp1,
                exp2,
                sign_mix,
            } => loop {
                let x1 = exp1.sample(rng);
                let mag = exp2.sample(rng);
                let x2 = if rng.random::<f64>() < *sign_mix {
                    mag
                } else {
                    -mag
                };
                if x1.hypot(x2) > self.eps {
                    return [x1, x2];
                }
            },
        }
    }
}

/// Clause of the admissibility definition violated by a candidate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Clause {
    I,
    II,
    III,
    IV,
    V,
    VI,
}

impl fmt::Display for Clause {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Clause::I => "(i)",
            Clause::II => "(ii)",
            Clause::III => "(iii)",
            Clause::IV => "(iv)",
            Clause::V => "(v)",
            Clause::VI => "(vi)",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub clause: Clause,
    pub message: String,
}

/// Every admissibility clause a candidate parameter record breaks.
#[derive(Debug, Clone, PartialEq, Error)]
#[error("parameters are not admissible: {}", .violations.iter().map(|v| format!("clause {}: {}", v.clause, v.message)).collect::<Vec<_>>().join("; "))]
pub struct AdmissibilityError {
    pub violations: Vec<Violation>,
}

impl AdmissibilityError {
    pub fn clauses(&self) -> Vec<Clause> {
        self.violations.iter().map(|v| v.clause).collect()
    }
}

/// Unvalidated parameter record, the JSON form of a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawParams {
    #[serde(default)]
    pub a: f64,
    #[serde(default)]
    pub alpha11: f64,
    #[serde(default)]
    pub alpha12: f64,
    /// Defaults to `alpha12`; present so asymmetric input can be rejected.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha21: Option<f64>,
    #[serde(default)]
    pub alpha22: f64,
    #[serde(default)]
    pub b1: f64,
    #[serde(default)]
    pub b2: f64,
    #[serde(default)]
    pub beta11: f64,
    #[serde(default)]
    pub beta12: f64,
    #[serde(default)]
    pub beta21: f64,
    #[serde(default)]
    pub beta22: f64,
    #[serde(default)]
    pub m: JumpMeasure,
    #[serde(default)]
    pub mu: JumpMeasure,
}

impl Default for RawParams {
    fn default() -> Self {
        Self {
            a: 0.0,
            alpha11: 0.0,
            alpha12: 0.0,
            alpha21: None,
            alpha22: 0.0,
            b1: 0.0,
            b2: 0.0,
            beta11: 0.0,
            beta12: 0.0,
            beta21: 0.0,
            beta22: 0.0,
            m: JumpMeasure::empty(),
            mu: JumpMeasure::empty(),
        }
    }
}

const PSD_TOL: f64 = 1e-12;

impl RawParams {
    pub fn validate(&self) -> Result<AdmissibleParams, AdmissibilityError> {
        validate_admissible(self)
    }
}

/// Validated parameter set with the derived diffusion factors.
#[derive(Debug, Clone, PartialEq)]
pub struct AdmissibleParams {
    a: f64,
    alpha: [[f64; 2]; 2],
    b: [f64; 2],
    beta: [[f64; 2]; 2],
    m: JumpMeasure,
    mu: JumpMeasure,
    sigma0: f64,
    sigma: [[f64; 2]; 2],
}

/// Checks every admissibility clause and derives `sigma0 = √a` and a factor
/// `sigma` with `sigma sigmaᵀ = alpha`.
pub fn validate_admissible(raw: &RawParams) -> Result<AdmissibleParams, AdmissibilityError> {
    let mut violations = Vec::new();
    let mut push = |clause, message: String| violations.push(Violation { clause, message });

    if !(raw.a >= 0.0) || !raw.a.is_finite() {
        push(
            Clause::I,
            format!("a must be a finite constant >= 0, got {}", raw.a),
        );
    }

    let alpha21 = raw.alpha21.unwrap_or(raw.alpha12);
    let mut alpha = [[raw.alpha11, raw.alpha12], [alpha21, raw.alpha22]];
    let alpha_finite = alpha.iter().flatten().all(|v| v.is_finite());
    if !alpha_finite {
        push(Clause::II, "alpha has non-finite entries".into());
    } else if (raw.alpha12 - alpha21).abs() > PSD_TOL {
        push(
            Clause::II,
            format!(
                "alpha is not symmetric: alpha12 = {}, alpha21 = {alpha21}",
                raw.alpha12
            ),
        );
    } else {
        let off = 0.5 * (raw.alpha12 + alpha21);
        alpha = [[raw.alpha11, off], [off, raw.alpha22]];
        let (lo, _) = sym_eigenvalues(alpha);
        if lo < -PSD_TOL {
            push(
                Clause::II,
                format!("alpha is not nonnegative definite (smallest eigenvalue {lo:e})"),
            );
        } else {
            alpha = clamp_psd(alpha);
        }
    }

    if !(raw.b1 >= 0.0) || !raw.b1.is_finite() || !raw.b2.is_finite() {
        push(
            Clause::III,
            format!(
                "(b1, b2) must lie in D = R+ x R, got ({}, {})",
                raw.b1, raw.b2
            ),
        );
    }

    let beta_entries = [raw.beta11, raw.beta12, raw.beta21, raw.beta22];
    if beta_entries.iter().any(|v| !v.is_finite()) {
        push(Clause::IV, "beta has non-finite entries".into());
    }
    if raw.beta12 != 0.0 {
        push(Clause::IV, format!("beta12 must be 0, got {}", raw.beta12));
    }

    for (clause, measure, name) in [(Clause::V, &raw.m, "m"), (Clause::VI, &raw.mu, "mu")] {
        if let Err(e) = measure.check() {
            push(clause, format!("{name}: {e}"));
            continue;
        }
        let kinds: &[MomentKind] = if clause == Clause::V {
            &[MomentKind::L1Xi1, MomentKind::L12Xi2]
        } else {
            &[MomentKind::L12Xi1, MomentKind::L12Xi2]
        };
        let mut total = 0.0;
        for &k in kinds {
            match measure.moment(k) {
                Ok(v) => total += v,
                Err(e) => {
                    push(clause, format!("{name}: {e}"));
                    total = f64::NAN;
                    break;
                }
            }
        }
        if !total.is_finite() && !total.is_nan() {
            push(clause, format!("{name}: moment integral is infinite"));
        }
    }

    if !violations.is_empty() {
        violations.sort_by_key(|v| v.clause);
        return Err(AdmissibilityError { violations });
    }

    let sigma = factor_psd(alpha);
    Ok(AdmissibleParams {
        a: raw.a,
        alpha,
        b: [raw.b1, raw.b2],
        beta: [[raw.beta11, 0.0], [raw.beta21, raw.beta22]],
        m: raw.m.clone(),
        mu: raw.mu.clone(),
        sigma0: raw.a.sqrt(),
        sigma,
    })
}

fn sym_eigenvalues(m: [[f64; 2]; 2]) -> (f64, f64) {
    let mean = 0.5 * (m[0][0] + m[1][1]);
    let rad = (0.5 * (m[0][0] - m[1][1])).hypot(m[0][1]);
    (mean - rad, mean + rad)
}

fn clamp_psd(m: [[f64; 2]; 2]) -> [[f64; 2]; 2] {
    let (lo, hi) = sym_eigenvalues(m);
    if lo >= 0.0 {
        return m;
    }
    // Rank-one projection onto the top eigenvector.
    let hi = hi.max(0.0);
    let (vx, vy) = if m[0][1] != 0.0 {
        let v = (hi - m[1][1], m[0][1]);
        let n = v.0.hypot(v.1);
        (v.0 / n, v.1 / n)
    } else if m[0][0] >= m[1][1] {
        (1.0, 0.0)
    } else {
        (0.0, 1.0)
    };
    [[hi * vx * vx, hi * vx * vy], [hi * vx * vy, hi * vy * vy]]
}

/// Triangular factor of a 2x2 PSD matrix, pivoting on the larger diagonal.
fn factor_psd(m: [[f64; 2]; 2]) -> [[f64; 2]; 2] {
    let [[a11, a12], [_, a22]] = m;
    if a11 >= a22 {
        if a11 == 0.0 {
            return [[0.0, 0.0], [0.0, 0.0]];
        }
        let l11 = a11.sqrt();
        let l21 = a12 / l11;
        [[l11, 0.0], [l21, (a22 - l21 * l21).max(0.0).sqrt()]]
    } else {
        let u22 = a22.sqrt();
        let u12 = a12 / u22;
        [[(a11 - u12 * u12).max(0.0).sqrt(), u12], [0.0, u22]]
    }
}

impl AdmissibleParams {
    pub fn a(&self) -> f64 {
        self.a
    }
    pub fn alpha(&self) -> [[f64; 2]; 2] {
        self.alpha
    }
    pub fn b(&self) -> [f64; 2] {
        self.b
    }
    pub fn beta(&self) -> [[f64; 2]; 2] {
        self.beta
    }
    pub fn beta11(&self) -> f64 {
        self.beta[0][0]
    }
    pub fn beta21(&self) -> f64 {
        self.beta[1][0]
    }
    pub fn beta22(&self) -> f64 {
        self.beta[1][1]
    }
    pub fn m(&self) -> &JumpMeasure {
        &self.m
    }
    pub fn mu(&self) -> &JumpMeasure {
        &self.mu
    }
    pub fn sigma0(&self) -> f64 {
        self.sigma0
    }
    pub fn sigma(&self) -> [[f64; 2]; 2] {
        self.sigma
    }

    /// The record this parameter set validates from.
    pub fn to_raw(&self) -> RawParams {
        RawParams {
            a: self.a,
            alpha11: self.alpha[0][0],
            alpha12: self.alpha[0][1],
            alpha21: None,
            alpha22: self.alpha[1][1],
            b1: self.b[0],
            b2: self.b[1],
            beta11: self.beta[0][0],
            beta12: 0.0,
            beta21: self.beta[1][0],
            beta22: self.beta[1][1],
            m: self.m.clone(),
            mu: self.mu.clone(),
        }
    }
}

impl Serialize for AdmissibleParams {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        self.to_raw().serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for AdmissibleParams {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let raw = RawParams::deserialize(deserializer)?;
        raw.validate().map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    #[test]
    fn identity_case_is_admissible() {
        let p = RawParams {
            alpha11: 1.0,
            alpha22: 1.0,
            ..Default::default()
        }
        .validate()
        .unwrap();
        assert_eq!(p.sigma(), [[1.0, 0.0], [0.0, 1.0]]);
        assert_eq!(p.sigma0(), 0.0);
    }

    #[test]
    fn beta12_rejected_with_clause_iv() {
        let err = RawParams {
            beta12: 0.1,
            ..Default::default()
        }
        .validate()
        .unwrap_err();
        assert_eq!(err.clauses(), vec![Clause::IV]);
        assert!(err.to_string().contains("(iv)"));
    }

    #[test]
    fn negative_b1_rejected_with_clause_iii() {
        let err = RawParams {
            b1: -1.0,
            ..Default::default()
        }
        .validate()
        .unwrap_err();
        assert_eq!(err.clauses(), vec![Clause::III]);
    }

    #[test]
    fn every_violated_clause_is_reported() {
        let err = RawParams {
            a: -1.0,
            alpha11: 1.0,
            alpha12: 2.0,
            alpha22: 1.0,
            b1: -0.5,
            beta12: 1.0,
            m: JumpMeasure::FiniteAtomic {
                atoms: vec![Atom {
                    xi: [-1.0, 0.0],
                    weight: 1.0,
                }],
                truncation_eps: 0.0,
            },
            mu: JumpMeasure::FiniteAtomic {
                atoms: vec![Atom {
                    xi: [0.0, 0.0],
                    weight: 1.0,
                }],
                truncation_eps: 0.0,
            },
            ..Default::default()
        }
        .validate()
        .unwrap_err();
        assert_eq!(
            err.clauses(),
            vec![
                Clause::I,
                Clause::II,
                Clause::III,
                Clause::IV,
                Clause::V,
                Clause::VI
            ]
        );
    }

    #[test]
    fn psd_tolerance_and_clamping() {
        // Singular matrix carrying a -5e-13 eigenvalue from rounding.
        let p = RawParams {
            alpha11: 1.0,
            alpha12: 1.0,
            alpha22: 1.0 - 1e-12,
            ..Default::default()
        }
        .validate()
        .unwrap();
        let s = p.sigma();
        let a = p.alpha();
        for i in 0..2 {
            for j in 0..2 {
                let prod = s[i][0] * s[j][0] + s[i][1] * s[j][1];
                assert!((prod - a[i][j]).abs() <= 1e-12);
            }
        }
        assert!(RawParams {
            alpha11: 1.0,
            alpha12: 1.0,
            alpha22: 1.0 - 1e-9,
            ..Default::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn factor_handles_zero_pivot() {
        let s = factor_psd([[0.0, 0.0], [0.0, 2.0]]);
        assert_eq!(s, [[0.0, 0.0], [0.0, 2f64.sqrt()]]);
        let s = factor_psd([[0.0, 0.0], [0.0, 0.0]]);
        assert_eq!(s, [[0.0; 2]; 2]);
    }

    #[test]
    fn atomic_moments() {
        let m = JumpMeasure::atomic([([1.0, 0.0], 2.0)]).unwrap();
        assert_eq!(m.moment(MomentKind::Xi1).unwrap(), 2.0);
        let m = JumpMeasure::atomic([([0.0, 0.5], 1.0)]).unwrap();
        assert_eq!(m.moment(MomentKind::L12Xi2).unwrap(), 0.25);
        let m = JumpMeasure::atomic([([1.0, 0.0], 2.0), ([0.0, -3.0], 0.5)]).unwrap();
        assert_eq!(m.moment(MomentKind::TotalMassOutside(0.0)).unwrap(), 2.5);
        assert_eq!(m.moment(MomentKind::TotalMassOutside(1.5)).unwrap(), 0.5);
    }

    #[test]
    fn product_exponential_moments_against_quadrature() {
        let m = JumpMeasure::product_exponential(1.0, 2.0, 1.0, 0.5).unwrap();
        assert!((m.moment(MomentKind::Xi1).unwrap() - 0.5).abs() < 1e-15);
        for rate in [0.3, 1.0, 2.0, 7.5] {
            let quad = quad::integrate_real(
                |x| x.min(x * x) * rate * (-rate * x).exp(),
                0.0,
                1.0,
                1e-13,
                0.0,
            )
            .unwrap()
                + quad::integrate_real(
                    |x| x * rate * (-rate * x).exp(),
                    1.0,
                    1.0 + 60.0 / rate,
                    1e-13,
                    0.0,
                )
                .unwrap();
            assert!((exp_l12(rate) - quad).abs() < 1e-12, "rate {rate}");
        }
    }

    #[test]
    fn exp_integral_single_atoms() {
        assert_eq!(
            JumpMeasure::atomic([([1.0, 0.0], 1.0)])
                .unwrap()
                .exp_integral(c(0.0, 0.0), c(0.0, 0.0), Compensation::None)
                .unwrap(),
            c(0.0, 0.0)
        );
        let v = JumpMeasure::atomic([([1.0, 0.0], 1.0)])
            .unwrap()
            .exp_integral(c(-1.0, 0.0), c(0.0, 0.0), Compensation::Xi2Only)
            .unwrap();
        assert!((v - c((-1.0f64).exp() - 1.0, 0.0)).norm() < 1e-15);
        assert!((v.re + 0.632_120_6).abs() < 1e-7);
        let v = JumpMeasure::atomic([([0.0, 1.0], 1.0)])
            .unwrap()
            .exp_integral(c(0.0, 0.0), c(0.0, 1.0), Compensation::Full)
            .unwrap();
        let expected = c(0.0, 1.0).exp() - 1.0 - c(0.0, 1.0);
        assert!((v - expected).norm() < 1e-15);
    }

    #[test]
    fn product_exponential_exp_integral_matches_closed_form() {
        // Closed-form Laplace transforms of the two exponential factors.
        let (total, r1, r2, p) = (1.7, 2.0, 1.3, 0.35);
        let m = JumpMeasure::product_exponential(total, r1, r2, p).unwrap();
        for (u1, u2) in [
            (c(-0.7, 0.4), c(0.0, 1.1)),
            (c(0.0, 0.0), c(0.0, 3.0)),
            (c(-2.0, 0.0), c(0.0, 0.0)),
            (c(-1e-5, 0.0), c(0.0, 1e-5)),
        ] {
            let lap1 = r1 / (r1 - u1);
            let lap2 = p * r2 / (r2 - u2) + (1.0 - p) * r2 / (r2 + u2);
            let m1 = 1.0 / r1;
            let m2 = (2.0 * p - 1.0) / r2;
            let none = total * (lap1 * lap2 - 1.0);
            for (mode, expected) in [
                (Compensation::None, none),
                (Compensation::Xi2Only, none - total * u2 * m2),
                (Compensation::Full, none - total * (u1 * m1 + u2 * m2)),
            ] {
                let got = m.exp_integral(u1, u2, mode).unwrap();
                let scale = expected.norm().max(1e-12);
                assert!(
                    (got - expected).norm() <= 1e-9 * scale.max(1e-6),
                    "{mode:?} {u1} {u2}: {got} vs {expected}"
                );
            }
        }
    }

    #[test]
    fn band_moments_product_exponential_small_eps() {
        let m = JumpMeasure::product_exponential(2.0, 1.0, 1.0, 0.5).unwrap();
        let full = m.band_moments(0.0, Region::All).unwrap();
        let band = m.band_moments(0.1, Region::All).unwrap();
        // Mass of the quarter/half disk: ~ density at origin * area = 2 * 1 * 0.5 * (pi 0.01 / 2).
        let removed = full.mass - band.mass;
        assert!(removed > 0.0 && removed < 2.0 * 0.5 * std::f64::consts::PI * 0.01 / 2.0);
        assert!((band.mean[1]).abs() < 1e-12);
        let upper = m.band_moments(0.0, Region::Upper).unwrap();
        let lower = m.band_moments(0.0, Region::Lower).unwrap();
        assert!((upper.mass + lower.mass - full.mass).abs() < 1e-14);
        assert!((upper.mean[1] - 1.0).abs() < 1e-14);
        assert!((lower.mean[1] + 1.0).abs() < 1e-14);
    }

    #[test]
    fn restriction_partitions_atoms() {
        let m = JumpMeasure::atomic([([1.0, 0.0], 1.0), ([0.5, -1.0], 2.0), ([0.0, 2.0], 3.0)])
            .unwrap();
        let up = m.restrict(Region::Upper);
        let lo = m.restrict(Region::Lower);
        assert_eq!(up.moment(MomentKind::TotalMassOutside(0.0)).unwrap(), 4.0);
        assert_eq!(lo.moment(MomentKind::TotalMassOutside(0.0)).unwrap(), 2.0);
    }

    #[test]
    fn sampler_frequencies() {
        use rand::SeedableRng;
        let m = JumpMeasure::atomic([([1.0, 0.0], 1.0), ([0.0, 1.0], 3.0)]).unwrap();
        let s = m.mark_sampler(0.0).unwrap();
        assert_eq!(s.mass(), 4.0);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let n = 40_000;
        let hits = (0..n).filter(|_| s.sample(&mut rng) == [0.0, 1.0]).count();
        let p = hits as f64 / n as f64;
        assert!((p - 0.75).abs() < 3.0 * (0.75 * 0.25 / n as f64).sqrt() * 1.5);
    }

    #[test]
    fn json_round_trip() {
        let raw = RawParams {
            a: 0.5,
            beta22: -1.0,
            m: JumpMeasure::product_exponential(1.0, 2.0, 3.0, 0.4).unwrap(),
            ..Default::default()
        };
        let p = raw.validate().unwrap();
        let text = serde_json::to_string(&p).unwrap();
        let back: AdmissibleParams = serde_json::from_str(&text).unwrap();
        assert_eq!(back, p);
    }
}
