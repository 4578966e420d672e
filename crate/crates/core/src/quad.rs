//! Adaptive Gauss–Kronrod quadrature and a few numerically careful complex
//! exponential helpers shared by the jump-measure integrals.

use num_complex::Complex64;

// 15-point Kronrod nodes on [-1, 1] (non-negative half) and weights; every odd
// index is also a 7-point Gauss node.
const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_728,
];
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

/// Quadrature failed to reach the requested tolerance within the interval budget.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadFailure {
    pub estimate: f64,
    pub error: f64,
}

fn gk15<F: Fn(f64) -> Complex64>(f: &F, a: f64, b: f64) -> (Complex64, f64) {
    let centre = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    let fc = f(centre);
    let mut kronrod = fc * WGK[7];
    let mut gauss = fc * WG[3];
    for j in 0..7 {
        let dx = half * XGK[j];
        let sum = f(centre - dx) + f(centre + dx);
        kronrod += sum * WGK[j];
        if j % 2 == 1 {
            gauss += sum * WG[j / 2];
        }
    }
    let err = ((kronrod - gauss) * half).norm();
    (kronrod * half, err)
}

/// Integrates a complex-valued `f` over `[a, b]` by global adaptive
/// bisection until the summed error estimate is below
/// `max(abs_tol, rel_tol * |I|)`.
pub fn integrate<F: Fn(f64) -> Complex64>(
    f: F,
    a: f64,
    b: f64,
    rel_tol: f64,
    abs_tol: f64,
) -> Result<Complex64, QuadFailure> {
    const MAX_INTERVALS: usize = 2000;
    if a == b {
        return Ok(Complex64::new(0.0, 0.0));
    }
    let (v, e) = gk15(&f, a, b);
    let mut pieces = vec![(a, b, v, e)];
    loop {
        let total: Complex64 = pieces.iter().map(|p| p.2).sum();
        let err: f64 = pieces.iter().map(|p| p.3).sum();
        if err <= abs_tol.max(rel_tol * total.norm()) {
            return Ok(total);
        }
        if pieces.len() >= MAX_INTERVALS {
            return Err(QuadFailure {
                estimate: total.norm(),
                error: err,
            });
        }
        let (idx, _) = pieces
            .iter()
            .enumerate()
            .max_by(|x, y| x.1 .3.total_cmp(&y.1 .3))
            .expect("non-empty");
        let (lo, hi, _, _) = pieces.swap_remove(idx);
        let mid = 0.5 * (lo + hi);
        let (v1, e1) = gk15(&f, lo, mid);
        let (v2, e2) = gk15(&f, mid, hi);
        pieces.push((lo, mid, v1, e1));
        pieces.push((mid, hi, v2, e2));
    }
}

/// Real-valued convenience wrapper around [`integrate`].
pub fn integrate_real<F: Fn(f64) -> f64>(
    f: F,
    a: f64,
    b: f64,
    rel_tol: f64,
    abs_tol: f64,
) -> Result<f64, QuadFailure> {
    integrate(|x| Complex64::new(f(x), 0.0), a, b, rel_tol, abs_tol).map(|z| z.re)
}

/// `e^z - 1` without cancellation for small `|z|`.
pub fn exp_m1(z: Complex64) -> Complex64 {
    if z.norm() < 0.5 {
        // z * sum_{k>=0} z^k / (k+1)!
        let mut term = Complex64::new(1.0, 0.0);
        let mut sum = term;
        for k in 2..30 {
            term *= z / k as f64;
            sum += term;
            if term.norm() < 1e-18 * sum.norm() {
                break;
            }
        }
        z * sum
    } else {
        z.exp() - 1.0
    }
}

/// `e^z - 1 - z` without cancellation for small `|z|`.
pub fn exp_m1_m(z: Complex64) -> Complex64 {
    if z.norm() < 0.5 {
        // z^2 * sum_{k>=0} z^k / (k+2)!
        let mut term = Complex64::new(0.5, 0.0);
        let mut sum = term;
        for k in 3..32 {
            term *= z / k as f64;
            sum += term;
            if term.norm() < 1e-18 * sum.norm() {
                break;
            }
        }
        z * z * sum
    } else {
        z.exp() - 1.0 - z
    }
}

/// `(e^x - 1) / x`, equal to 1 at the origin.
pub fn phi1(x: f64) -> f64 {
    if x.abs() < 1e-5 {
        1.0 + x / 2.0 + x * x / 6.0 + x * x * x / 24.0
    } else {
        x.exp_m1() / x
    }
}

/// First divided difference of `exp` at `x`, `y`: `(e^y - e^x) / (y - x)`.
pub fn exp_dd1(x: f64, y: f64) -> f64 {
    x.exp() * phi1(y - x)
}

// d/dz phi1(z) = (e^z (z - 1) + 1) / z^2 = sum_k (k+1) z^k / (k+2)!
fn dphi1(z: f64) -> f64 {
    if z.abs() < 0.1 {
        let mut term = 0.5; // z^0 / 2!
        let mut sum = term; // times (k+1) = 1
        for k in 1..20 {
            term *= z / (k + 2) as f64;
            sum += term * (k + 1) as f64;
        }
        sum
    } else {
        (z.exp() * (z - 1.0) + 1.0) / (z * z)
    }
}

/// Second divided difference of `exp` at `0`, `x`, `y`.
///
/// Equals the integral of `e^{s x + r y}` over the unit simplex
/// `{s, r >= 0, s + r <= 1}`.
pub fn exp_dd2_origin(x: f64, y: f64) -> f64 {
    let gap = y - x;
    if gap.abs() <= 1e-6 * (1.0 + x.abs().max(y.abs())) {
        // phi1'(m) + O(gap^2)
        dphi1(0.5 * (x + y))
    } else {
        (phi1(y) - phi1(x)) / gap
    }
}
