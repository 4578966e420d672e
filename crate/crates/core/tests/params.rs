use affine_lab::params::{Clause, Compensation, MomentKind, Region};
use affine_lab::{examples, JumpMeasure, RawParams, UPoint};
use num_complex::Complex64;
use proptest::prelude::*;

fn atom_strategy() -> impl Strategy<Value = ([f64; 2], f64)> {
    ((0.0f64..2.0), (-2.0f64..2.0), (0.01f64..3.0)).prop_filter_map("origin", |(a, b, w)| {
        (a.hypot(b) > 1e-6).then_some(([a, b], w))
    })
}

fn measure_strategy() -> impl Strategy<Value = JumpMeasure> {
    prop_oneof![
        prop::collection::vec(atom_strategy(), 1..6)
            .prop_map(|atoms| JumpMeasure::atomic(atoms).unwrap()),
        ((0.1f64..3.0), (0.5f64..5.0), (0.5f64..5.0), (0.0f64..1.0))
            .prop_map(|(t, r1, r2, s)| JumpMeasure::product_exponential(t, r1, r2, s).unwrap()),
    ]
}

fn u_strategy() -> impl Strategy<Value = UPoint> {
    ((-3.0f64..=0.0), (-3.0f64..3.0), (-3.0f64..3.0))
        .prop_map(|(r, i, v)| UPoint::new(Complex64::new(r, i), Complex64::new(0.0, v)).unwrap())
}

/// Direct sum over atoms, written out here as an oracle for the library.
fn atom_sum(atoms: &[([f64; 2], f64)], u: UPoint, comp: Compensation) -> Complex64 {
    atoms
        .iter()
        .map(|&(xi, w)| {
            let a = u.u1 * xi[0];
            let b = u.u2 * xi[1];
            let lin = match comp {
                Compensation::None => Complex64::new(0.0, 0.0),
                Compensation::Xi2Only => b,
                Compensation::Full => a + b,
            };
            w * ((a + b).exp() - 1.0 - lin)
        })
        .sum()
}

#[test]
fn atomic_exp_integral_matches_direct_sum() {
    let atoms = [([0.5, 0.3], 0.6), ([0.2, -0.4], 0.5), ([0.0, 0.5], 0.3)];
    let m = JumpMeasure::atomic(atoms).unwrap();
    for u in examples::test_frequencies() {
        for comp in [
            Compensation::None,
            Compensation::Xi2Only,
            Compensation::Full,
        ] {
            let got = m.exp_integral(u.u1, u.u2, comp).unwrap();
            let want = atom_sum(&atoms, u, comp);
            assert!(
                (got - want).norm() < 1e-14,
                "{comp:?} at {u:?}: {got} vs {want}"
            );
        }
    }
}

#[test]
fn product_exponential_first_moments() {
    // E xi1 = 1/rate1, E xi2 = (2s - 1)/rate2 for the two-sided law
    let m = JumpMeasure::product_exponential(2.0, 4.0, 5.0, 0.8).unwrap();
    assert!((m.moment(MomentKind::Xi1).unwrap() - 2.0 / 4.0).abs() < 1e-12);
    assert!((m.moment(MomentKind::Xi2).unwrap() - 2.0 * 0.6 / 5.0).abs() < 1e-12);
    assert!((m.moment(MomentKind::Xi1Sq).unwrap() - 2.0 * 2.0 / 16.0).abs() < 1e-12);
    assert!((m.moment(MomentKind::Xi2Sq).unwrap() - 2.0 * 2.0 / 25.0).abs() < 1e-12);
}

#[test]
fn band_moments_of_halves_add_up() {
    let m = JumpMeasure::product_exponential(1.5, 2.0, 3.0, 0.4).unwrap();
    let all = m.band_moments(0.05, Region::All).unwrap();
    let up = m.band_moments(0.05, Region::Upper).unwrap();
    let lo = m.band_moments(0.05, Region::Lower).unwrap();
    assert!((up.mass + lo.mass - all.mass).abs() < 1e-9);
    assert!(all.mass <= 1.5 + 1e-12);
}

#[test]
fn admissibility_reports_named_clauses() {
    let raw = RawParams {
        beta12: 0.5,
        b1: -1.0,
        a: -0.1,
        ..Default::default()
    };
    let e = raw.validate().unwrap_err();
    assert_eq!(e.clauses(), vec![Clause::I, Clause::III, Clause::IV]);

    let asym = RawParams {
        alpha11: 1.0,
        alpha12: 0.1,
        alpha21: Some(0.2),
        alpha22: 1.0,
        ..Default::default()
    };
    assert_eq!(asym.validate().unwrap_err().clauses(), vec![Clause::II]);
}

#[test]
fn builtin_sets_survive_json() {
    for (_, p) in examples::all() {
        let s = serde_json::to_string(&p.to_raw()).unwrap();
        let back: RawParams = serde_json::from_str(&s).unwrap();
        assert_eq!(back.validate().unwrap(), p);
    }
}

#[test]
fn unknown_keys_are_rejected() {
    let e = serde_json::from_str::<RawParams>(r#"{"a": 1.0, "gamma": 2.0}"#).unwrap_err();
    assert!(e.to_string().contains("gamma"));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn uncompensated_integral_has_nonpositive_real_part(m in measure_strategy(), u in u_strategy()) {
        let v = m.exp_integral(u.u1, u.u2, Compensation::None).unwrap();
        prop_assert!(v.re <= 1e-10, "{v}");
    }

    #[test]
    fn exp_integral_is_conjugate_symmetric(m in measure_strategy(), u in u_strategy()) {
        for comp in [Compensation::None, Compensation::Xi2Only, Compensation::Full] {
            let a = m.exp_integral(u.u1, u.u2, comp).unwrap();
            let c = u.conj();
            let b = m.exp_integral(c.u1, c.u2, comp).unwrap();
            prop_assert!((a.conj() - b).norm() <= 1e-9 * (1.0 + a.norm()));
        }
    }

    #[test]
    fn exp_integral_is_additive_in_the_measure(
        a in prop::collection::vec(atom_strategy(), 1..4),
        b in prop::collection::vec(atom_strategy(), 1..4),
        u in u_strategy(),
    ) {
        let ma = JumpMeasure::atomic(a.clone()).unwrap();
        let mb = JumpMeasure::atomic(b.clone()).unwrap();
        let mab = JumpMeasure::atomic(a.into_iter().chain(b)).unwrap();
        let lhs = mab.exp_integral(u.u1, u.u2, Compensation::Full).unwrap();
        let rhs = ma.exp_integral(u.u1, u.u2, Compensation::Full).unwrap()
            + mb.exp_integral(u.u1, u.u2, Compensation::Full).unwrap();
        prop_assert!((lhs - rhs).norm() <= 1e-12 * (1.0 + lhs.norm()));
    }

    #[test]
    fn sigma_squares_to_alpha(a11 in 0.0f64..3.0, a22 in 0.0f64..3.0, rho in -1.0f64..=1.0) {
        let a12 = rho * (a11 * a22).sqrt();
        let p = RawParams { alpha11: a11, alpha12: a12, alpha22: a22, ..Default::default() }
            .validate()
            .unwrap();
        let s = p.sigma();
        let alpha = p.alpha();
        for i in 0..2 {
            for j in 0..2 {
                let v = s[i][0] * s[j][0] + s[i][1] * s[j][1];
                prop_assert!((v - alpha[i][j]).abs() < 1e-9, "{i}{j}: {v} vs {}", alpha[i][j]);
            }
        }
    }

    #[test]
    fn nonzero_beta12_is_always_clause_iv(beta12 in prop::num::f64::NORMAL) {
        let raw = RawParams { beta12, ..Default::default() };
        prop_assert_eq!(raw.validate().unwrap_err().clauses(), vec![Clause::IV]);
    }
}
