//! Characteristic exponents of the affine semigroup.
//!
//! For `u ∈ U` the transition law satisfies
//! `E_x[e^{<u, X_t>}] = exp(x1 ψ1(t,u) + x2 ψ2(t,u) + φ(t,u))` with
//! `ψ2(t,u) = e^{β22 t} u2`, `ψ1' = R(ψ1, e^{β22 t} u2)` and
//! `φ' = F(ψ1, e^{β22 t} u2)`.

use std::io::{self, Write};

use num_complex::Complex64;
use thiserror::Error;

use crate::io::fmt_f64;
use crate::ode::{self, OdeError, Tolerance};
use crate::params::{
    AdmissibleParams, Compensation, DomainError, MeasureError, MomentKind, UPoint,
};
use crate::quad;

/// Tolerance used by [`char_fn`] when the caller does not pick one.
pub const DEFAULT_TOL: f64 = 1e-9;

// Local error target handed to the stepper, relative to the requested tolerance.
const LOCAL_TOL_FACTOR: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TransformError {
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error(transparent)]
    Measure(#[from] MeasureError),
    #[error("tolerance {0:e} outside [1e-12, 1e-4]")]
    BadTolerance(f64),
    #[error("time grid must start at 0 and be nondecreasing")]
    BadGrid,
    #[error("step size underflow (stiff or exploding solution); last good time {t_last}")]
    StepUnderflow { t_last: f64 },
    #[error("Re(psi1) = {re_psi1:e} > 0 at t = {t}: solution left the domain U")]
    DomainBreach { t: f64, re_psi1: f64 },
}

/// `ψ1`, `ψ2`, `φ` sampled on a time grid for one frequency point.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformSolution {
    pub u: UPoint,
    pub t_grid: Vec<f64>,
    pub psi1: Vec<Complex64>,
    pub psi2: Vec<Complex64>,
    pub phi: Vec<Complex64>,
    /// Local error tolerance handed to the stepper.
    pub tol_used: f64,
    pub steps_taken: usize,
}

impl TransformSolution {
    /// `ψ(t_k, u)` as a frequency point, usable as the start of a composed solve.
    pub fn psi_point(&self, k: usize) -> Result<UPoint, DomainError> {
        UPoint::new(self.psi1[k], self.psi2[k])
    }

    /// Writes `t, re_psi1, im_psi1, re_psi2, im_psi2, re_phi, im_phi`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "t,re_psi1,im_psi1,re_psi2,im_psi2,re_phi,im_phi")?;
        for k in 0..self.t_grid.len() {
            writeln!(
                w,
                "{},{},{},{},{},{},{}",
                fmt_f64(self.t_grid[k]),
                fmt_f64(self.psi1[k].re),
                fmt_f64(self.psi1[k].im),
                fmt_f64(self.psi2[k].re),
                fmt_f64(self.psi2[k].im),
                fmt_f64(self.phi[k].re),
                fmt_f64(self.phi[k].im),
            )?;
        }
        Ok(())
    }
}

fn f_raw(p: &AdmissibleParams, u1: Complex64, u2: Complex64) -> Result<Complex64, MeasureError> {
    let [b1, b2] = p.b();
    let jumps = p.m().exp_integral(u1, u2, Compensation::Xi2Only)?;
    Ok(u1 * b1 + u2 * b2 + u2 * u2 * p.a() + jumps)
}

fn r_raw(p: &AdmissibleParams, u1: Complex64, u2: Complex64) -> Result<Complex64, MeasureError> {
    let alpha = p.alpha();
    let jumps = p.mu().exp_integral(u1, u2, Compensation::Full)?;
    Ok(u1 * p.beta11()
        + u2 * p.beta21()
        + u1 * u1 * alpha[0][0]
        + u1 * u2 * (2.0 * alpha[0][1])
        + u2 * u2 * alpha[1][1]
        + jumps)
}

/// Immigration mechanism `F(u) = b1 u1 + b2 u2 + a u2² + ∫(e^{<u,ξ>} - 1 - ξ2 u2) m(dξ)`.
pub fn eval_f(params: &AdmissibleParams, u: UPoint) -> Result<Complex64, TransformError> {
    Ok(f_raw(params, u.u1, u.u2)?)
}

/// Branching mechanism
/// `R(u) = β11 u1 + β21 u2 + α11 u1² + 2 α12 u1 u2 + α22 u2² + ∫(e^{<u,ξ>} - 1 - <u,ξ>) μ(dξ)`.
pub fn eval_r(params: &AdmissibleParams, u: UPoint) -> Result<Complex64, TransformError> {
    Ok(r_raw(params, u.u1, u.u2)?)
}

/// Solves the generalized Riccati system for `ψ1` and `φ` with a
/// Dormand–Prince 5(4) pair and samples it on `t_grid`.
pub fn solve_transform(
    params: &AdmissibleParams,
    u: UPoint,
    t_grid: &[f64],
    tol: f64,
) -> Result<TransformSolution, TransformError> {
    if !(1e-12..=1e-4).contains(&tol) {
        return Err(TransformError::BadTolerance(tol));
    }
    if t_grid.first() != Some(&0.0)
        || t_grid.windows(2).any(|w| !(w[1] >= w[0]))
        || t_grid.iter().any(|t| !t.is_finite())
    {
        return Err(TransformError::BadGrid);
    }
    let beta22 = params.beta22();
    let psi2: Vec<Complex64> = t_grid.iter().map(|&t| u.u2 * (beta22 * t).exp()).collect();

    let local = tol * LOCAL_TOL_FACTOR;
    let rhs = |s: f64, y: &[f64; 4]| -> Result<[f64; 4], TransformError> {
        let u2s = u.u2 * (beta22 * s).exp();
        let psi1 = Complex64::new(y[0], y[1]);
        let r = r_raw(params, psi1, u2s)?;
        let f = f_raw(params, psi1, u2s)?;
        Ok([r.re, r.im, f.re, f.im])
    };
    let fix = |t: f64, y: &mut [f64; 4]| -> Result<bool, TransformError> {
        if y[0] > 0.0 {
            if y[0] <= tol {
                y[0] = 0.0;
                return Ok(true);
            }
            return Err(TransformError::DomainBreach { t, re_psi1: y[0] });
        }
        Ok(false)
    };
    let mut out = Vec::with_capacity(t_grid.len());
    let stats = ode::dopri5(
        rhs,
        [u.u1.re, u.u1.im, 0.0, 0.0],
        t_grid,
        Tolerance {
            rtol: local,
            atol: local,
            max_steps: 1_000_000,
        },
        fix,
        &mut out,
    )
    .map_err(|e| match e {
        OdeError::StepUnderflow { t } => TransformError::StepUnderflow { t_last: t },
        OdeError::Rhs(e) | OdeError::Rejected { reason: e, .. } => e,
    })?;

    Ok(TransformSolution {
        u,
        t_grid: t_grid.to_vec(),
        psi1: out.iter().map(|y| Complex64::new(y[0], y[1])).collect(),
        psi2,
        phi: out.iter().map(|y| Complex64::new(y[2], y[3])).collect(),
        tol_used: local,
        steps_taken: stats.accepted,
    })
}

/// `exp(x1 ψ1(t,u) + x2 ψ2(t,u) + φ(t,u))` at the default tolerance.
pub fn char_fn(
    params: &AdmissibleParams,
    x: [f64; 2],
    t: f64,
    u: UPoint,
) -> Result<Complex64, TransformError> {
    char_fn_with_tol(params, x, t, u, DEFAULT_TOL)
}

pub fn char_fn_with_tol(
    params: &AdmissibleParams,
    x: [f64; 2],
    t: f64,
    u: UPoint,
    tol: f64,
) -> Result<Complex64, TransformError> {
    let sol = solve_transform(params, u, &[0.0, t], tol)?;
    Ok(log_char(&sol, 1, x).exp())
}

/// `x1 ψ1 + x2 ψ2 + φ` at grid index `k`.
pub fn log_char(sol: &TransformSolution, k: usize, x: [f64; 2]) -> Complex64 {
    sol.psi1[k] * x[0] + sol.psi2[k] * x[1] + sol.phi[k]
}

/// Residuals of the semigroup identities
/// `ψ(r+t,u) = ψ(r, ψ(t,u))` and `φ(r+t,u) = φ(r, ψ(t,u)) + φ(t,u)`.
pub fn flow_residual(
    params: &AdmissibleParams,
    u: UPoint,
    r: f64,
    t: f64,
    tol: f64,
) -> Result<(f64, f64), TransformError> {
    let direct = solve_transform(params, u, &[0.0, t, r + t], tol)?;
    let inner = direct.psi_point(1)?;
    let composed = solve_transform(params, inner, &[0.0, r], tol)?;
    let psi_res = (direct.psi1[2] - composed.psi1[1]).norm();
    let phi_res = (direct.phi[2] - composed.phi[1] - direct.phi[1]).norm();
    Ok((psi_res, phi_res))
}

/// Closed-form first-moment functionals of the semigroup.
///
/// `E_x[X1(t)] = x1 q11(t) + h1(t)` and
/// `E_x[X2(t)] = x1 q12(t) + x2 e^{β22 t} + h2(t)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MomentFunctionals {
    beta11: f64,
    beta21: f64,
    beta22: f64,
    /// `b1 + ∫ ξ1 m(dξ)`
    immigration1: f64,
    b2: f64,
}

pub fn moment_functionals(params: &AdmissibleParams) -> MomentFunctionals {
    let m_xi1 = params
        .m()
        .moment(MomentKind::Xi1)
        .expect("first moments of admissible measures are finite");
    MomentFunctionals {
        beta11: params.beta11(),
        beta21: params.beta21(),
        beta22: params.beta22(),
        immigration1: params.b()[0] + m_xi1,
        b2: params.b()[1],
    }
}

impl MomentFunctionals {
    pub fn q11(&self, t: f64) -> f64 {
        (self.beta11 * t).exp()
    }

    /// Solution of `q' = β21 e^{β11 t} + β22 q`, `q(0) = 0`; the equal-rate
    /// case reduces to `t β21 e^{β11 t}`.
    pub fn q12(&self, t: f64) -> f64 {
        self.beta21 * t * quad::exp_dd1(self.beta22 * t, self.beta11 * t)
    }

    pub fn h1(&self, t: f64) -> f64 {
        self.immigration1 * t * quad::phi1(self.beta11 * t)
    }

    /// Solution of `h' = b2 + β21 h1 + β22 h`, `h(0) = 0`.
    pub fn h2(&self, t: f64) -> f64 {
        self.b2 * t * quad::phi1(self.beta22 * t)
            + self.beta21
                * self.immigration1
                * t
                * t
                * quad::exp_dd2_origin(self.beta11 * t, self.beta22 * t)
    }

    pub fn mean_x(&self, x0: f64, t: f64) -> f64 {
        x0 * self.q11(t) + self.h1(t)
    }

    pub fn mean_z(&self, x0: f64, z0: f64, t: f64) -> f64 {
        x0 * self.q12(t) + z0 * (self.beta22 * t).exp() + self.h2(t)
    }
}
