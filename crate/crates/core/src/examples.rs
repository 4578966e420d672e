//! Built-in parameter sets used by the experiments, the tests and the CLI.

use crate::params::{AdmissibleParams, JumpMeasure, RawParams, UPoint};

/// Gaussian regime: `a = 1`, `β22 = −1`, everything else zero.
pub fn ou() -> AdmissibleParams {
    RawParams {
        a: 1.0,
        beta22: -1.0,
        ..Default::default()
    }
    .validate()
    .expect("built-in set is admissible")
}

/// Square-root regime in the first coordinate: `α11 = 0.5`, `β11 = −1`,
/// `b1 = 0.5`, with `β22 = −1`.
pub fn cir() -> AdmissibleParams {
    RawParams {
        alpha11: 0.5,
        beta11: -1.0,
        b1: 0.5,
        beta22: -1.0,
        ..Default::default()
    }
    .validate()
    .expect("built-in set is admissible")
}

/// Full jump-affine set with finite atomic `m` and `μ`.
pub fn full_jump_affine() -> AdmissibleParams {
    RawParams {
        a: 0.25,
        alpha11: 0.3,
        alpha12: 0.1,
        alpha21: None,
        alpha22: 0.2,
        b1: 0.5,
        b2: 0.2,
        beta11: -0.8,
        beta12: 0.0,
        beta21: 0.3,
        beta22: -1.0,
        m: JumpMeasure::atomic([([0.5, 0.3], 0.6), ([0.2, -0.4], 0.5), ([0.0, 0.5], 0.3)])
            .expect("valid atoms"),
        mu: JumpMeasure::atomic([([0.4, 0.2], 0.8), ([0.3, -0.3], 0.5)]).expect("valid atoms"),
    }
    .validate()
    .expect("built-in set is admissible")
}

/// Looks a built-in set up by name (`ou`, `cir`, `full`).
pub fn by_name(name: &str) -> Option<AdmissibleParams> {
    match name {
        "ou" => Some(ou()),
        "cir" => Some(cir()),
        "full" | "full_jump_affine" => Some(full_jump_affine()),
        _ => None,
    }
}

/// The three named sets in a fixed order.
pub fn all() -> Vec<(&'static str, AdmissibleParams)> {
    vec![("ou", ou()), ("cir", cir()), ("full", full_jump_affine())]
}

/// Six test frequencies in `U` mixing real, imaginary and joint directions.
pub fn test_frequencies() -> Vec<UPoint> {
    [
        (-1.0, 0.0),
        (0.0, 1.0),
        (-0.5, 2.0),
        (-0.5, 0.0),
        (0.0, 0.5),
        (-1.0, -1.0),
    ]
    .into_iter()
    .map(|(a, b)| UPoint::real_imag(a, b).expect("frequency in U"))
    .collect()
}
