//! Dormand–Prince 5(4) integrator with dense output for small real systems.

const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;

const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const A71: f64 = 35.0 / 384.0;
const A73: f64 = 500.0 / 1113.0;
const A74: f64 = 125.0 / 192.0;
const A75: f64 = -2187.0 / 6784.0;
const A76: f64 = 11.0 / 84.0;

const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

const D1: f64 = -12715105075.0 / 11282082432.0;
const D3: f64 = 87487479700.0 / 32700410799.0;
const D4: f64 = -10690763975.0 / 1880347072.0;
const D5: f64 = 701980252875.0 / 199316789632.0;
const D6: f64 = -1453857185.0 / 822651844.0;
const D7: f64 = 69997945.0 / 29380423.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OdeError<E> {
    /// Step size collapsed below the representable resolution at `t`.
    StepUnderflow { t: f64 },
    /// Right-hand side reported a failure.
    Rhs(E),
    /// Post-step hook rejected the state.
    Rejected { t: f64, reason: E },
}

/// Error-controlled integration settings.
#[derive(Debug, Clone, Copy)]
pub struct Tolerance {
    pub rtol: f64,
    pub atol: f64,
    pub max_steps: usize,
}

pub struct Stats {
    pub accepted: usize,
    pub rejected: usize,
}

/// Integrates `y' = f(t, y)` from `grid[0]` to the last grid time, writing the
/// dense-output solution at every grid time into `out` (one row per time).
///
/// `fix` runs on every accepted state and on every dense sample; it may
/// project the state (e.g. clamp a sign) or reject it.
pub fn dopri5<const N: usize, E, F, P>(
    mut f: F,
    y0: [f64; N],
    grid: &[f64],
    tol: Tolerance,
    mut fix: P,
    out: &mut Vec<[f64; N]>,
) -> Result<Stats, OdeError<E>>
where
    F: FnMut(f64, &[f64; N]) -> Result<[f64; N], E>,
    P: FnMut(f64, &mut [f64; N]) -> Result<bool, E>,
{
    out.clear();
    let mut stats = Stats {
        accepted: 0,
        rejected: 0,
    };
    if grid.is_empty() {
        return Ok(stats);
    }
    let t_end = *grid.last().unwrap();
    let mut t = grid[0];
    let mut y = y0;
    out.push(y);
    let mut next = 1;
    while next < grid.len() && grid[next] <= t {
        out.push(y);
        next += 1;
    }
    if next == grid.len() {
        return Ok(stats);
    }

    let mut k1 = f(t, &y).map_err(OdeError::Rhs)?;
    let mut h = initial_step(&mut f, t, &y, &k1, t_end - t, tol)?;

    let add = |y: &[f64; N], terms: &[(f64, &[f64; N])], h: f64| -> [f64; N] {
        let mut r = *y;
        for (c, k) in terms {
            for i in 0..N {
                r[i] += h * c * k[i];
            }
        }
        r
    };

    while next < grid.len() {
        if stats.accepted + stats.rejected >= tol.max_steps {
            return Err(OdeError::StepUnderflow { t });
        }
        let remaining = t_end - t;
        if h >= remaining {
            h = remaining;
        }
        if h <= 1e-14 * t.abs().max(1.0) {
            return Err(OdeError::StepUnderflow { t });
        }
        let k2 = f(t + C2 * h, &add(&y, &[(A21, &k1)], h)).map_err(OdeError::Rhs)?;
        let k3 = f(t + C3 * h, &add(&y, &[(A31, &k1), (A32, &k2)], h)).map_err(OdeError::Rhs)?;
        let k4 = f(
            t + C4 * h,
            &add(&y, &[(A41, &k1), (A42, &k2), (A43, &k3)], h),
        )
        .map_err(OdeError::Rhs)?;
        let k5 = f(
            t + C5 * h,
            &add(&y, &[(A51, &k1), (A52, &k2), (A53, &k3), (A54, &k4)], h),
        )
        .map_err(OdeError::Rhs)?;
        let k6 = f(
            t + h,
            &add(
                &y,
                &[(A61, &k1), (A62, &k2), (A63, &k3), (A64, &k4), (A65, &k5)],
                h,
            ),
        )
        .map_err(OdeError::Rhs)?;
        let y_new = add(
            &y,
            &[(A71, &k1), (A73, &k3), (A74, &k4), (A75, &k5), (A76, &k6)],
            h,
        );
        let k7 = f(t + h, &y_new).map_err(OdeError::Rhs)?;

        let mut err_sq = 0.0;
        for i in 0..N {
            let e =
                h * (E1 * k1[i] + E3 * k3[i] + E4 * k4[i] + E5 * k5[i] + E6 * k6[i] + E7 * k7[i]);
            let sc = tol.atol + tol.rtol * y[i].abs().max(y_new[i].abs());
            err_sq += (e / sc) * (e / sc);
        }
        let err = (err_sq / N as f64).sqrt();

        if err <= 1.0 {
            // Dense output coefficients.
            let mut r1 = [0.0; N];
            let mut r2 = [0.0; N];
            let mut r3 = [0.0; N];
            let mut r4 = [0.0; N];
            for i in 0..N {
                let dy = y_new[i] - y[i];
                let bspl = h * k1[i] - dy;
                r1[i] = dy;
                r2[i] = bspl;
                r3[i] = dy - h * k7[i] - bspl;
                r4[i] = h
                    * (D1 * k1[i] + D3 * k3[i] + D4 * k4[i] + D5 * k5[i] + D6 * k6[i] + D7 * k7[i]);
            }
            let t_new = if h == remaining { t_end } else { t + h };
            while next < grid.len() && grid[next] <= t_new {
                let s = ((grid[next] - t) / h).clamp(0.0, 1.0);
                let s1 = 1.0 - s;
                let mut yi = [0.0; N];
                for i in 0..N {
                    yi[i] = y[i] + s * (r1[i] + s1 * (r2[i] + s * (r3[i] + s1 * r4[i])));
                }
                if grid[next] == t_new {
                    yi = y_new;
                }
                fix(grid[next], &mut yi).map_err(|reason| OdeError::Rejected {
                    t: grid[next],
                    reason,
                })?;
                out.push(yi);
                next += 1;
            }
            let mut y_acc = y_new;
            let changed =
                fix(t_new, &mut y_acc).map_err(|reason| OdeError::Rejected { t: t_new, reason })?;
            t = t_new;
            y = y_acc;
            k1 = if changed {
                f(t, &y).map_err(OdeError::Rhs)?
            } else {
                k7
            };
            stats.accepted += 1;
            let fac = if err == 0.0 {
                5.0
            } else {
                (0.9 * err.powf(-0.2)).clamp(0.2, 5.0)
            };
            h *= fac;
        } else {
            stats.rejected += 1;
            let fac = if err.is_finite() {
                (0.9 * err.powf(-0.2)).clamp(0.1, 0.9)
            } else {
                0.1
            };
            h *= fac;
        }
    }
    Ok(stats)
}

fn initial_step<const N: usize, E, F>(
    f: &mut F,
    t: f64,
    y: &[f64; N],
    k1: &[f64; N],
    span: f64,
    tol: Tolerance,
) -> Result<f64, OdeError<E>>
where
    F: FnMut(f64, &[f64; N]) -> Result<[f64; N], E>,
{
    // Hairer–Nørsett–Wanner starting step heuristic.
    let mut d0 = 0.0;
    let mut d1 = 0.0;
    for i in 0..N {
        let sc = tol.atol + tol.rtol * y[i].abs();
        d0 += (y[i] / sc).powi(2);
        d1 += (k1[i] / sc).powi(2);
    }
    d0 = (d0 / N as f64).sqrt();
    d1 = (d1 / N as f64).sqrt();
    let mut h0 = if d0 < 1e-5 || d1 < 1e-5 {
        1e-6
    } else {
        0.01 * d0 / d1
    };
    h0 = h0.min(span);
    let mut y1 = *y;
    for i in 0..N {
        y1[i] += h0 * k1[i];
    }
    let k2 = f(t + h0, &y1).map_err(OdeError::Rhs)?;
    let mut d2 = 0.0;
    for i in 0..N {
        let sc = tol.atol + tol.rtol * y[i].abs();
        d2 += ((k2[i] - k1[i]) / sc).powi(2);
    }
    d2 = (d2 / N as f64).sqrt() / h0;
    let h1 = if d1.max(d2) <= 1e-15 {
        (h0 * 1e-3).max(1e-6)
    } else {
        (0.01 / d1.max(d2)).powf(0.2)
    };
    Ok((100.0 * h0).min(h1).min(span))
}
