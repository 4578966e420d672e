use affine_lab::noise::{generate_noise, substream_seed, NoiseSystem, TimeGrid};
use affine_lab::sde::{
    simulate_affine, simulate_affine_voc, simulate_catalytic, simulate_generalized_cbi,
    simulate_reactant_pair, AffineScheme, Coefficient, Decomposition, GeneralizedCbiSpec,
    ReactantMode, SdeError, StepFunction,
};
use affine_lab::transform::moment_functionals;
use affine_lab::{examples, AdmissibleParams, JumpMeasure, RawParams};
use proptest::prelude::*;
use std::sync::Arc;

fn noise_for(p: &AdmissibleParams, t_max: f64, dt: f64, seed: u64) -> NoiseSystem {
    let grid = TimeGrid::new(t_max, dt).unwrap();
    generate_noise(p.m(), p.mu(), grid, 3, seed, 64.0, 1e-4).unwrap()
}

fn drift_only() -> AdmissibleParams {
    RawParams {
        b1: 0.5,
        beta11: -1.0,
        b2: 0.2,
        beta21: 0.3,
        beta22: -1.0,
        ..Default::default()
    }
    .validate()
    .unwrap()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

#[test]
fn drift_only_matches_euler_recursion() {
    let p = drift_only();
    let dt = 1.0 / 64.0;
    let noise = noise_for(&p, 1.0, dt, 1);
    let b = simulate_affine(&p, 2.0, -1.0, &noise).unwrap();
    let (mut x, mut z) = (2.0f64, -1.0f64);
    let xs = b.component("x").unwrap();
    let zs = b.component("z").unwrap();
    for k in 0..=noise.grid().n_steps() {
        assert!(
            (xs[k] - x).abs() < 1e-14 && (zs[k] - z).abs() < 1e-14,
            "step {k}"
        );
        let nx = x + (0.5 - x) * dt;
        z += (0.2 + 0.3 * x - z) * dt;
        x = nx;
    }
}

#[test]
fn drift_only_converges_at_first_order() {
    let p = drift_only();
    let mf = moment_functionals(&p);
    let err = |dt: f64| {
        let b = simulate_affine(&p, 2.0, -1.0, &noise_for(&p, 1.0, dt, 0)).unwrap();
        let x1 = *b.component("x").unwrap().last().unwrap();
        let z1 = *b.component("z").unwrap().last().unwrap();
        (x1 - mf.mean_x(2.0, 1.0)).abs() + (z1 - mf.mean_z(2.0, -1.0, 1.0)).abs()
    };
    let mut prev = err(1.0 / 16.0);
    for level in 5..=9 {
        let e = err(0.5f64.powi(level));
        let ratio = prev / e;
        assert!(
            ratio > 1.3 * 1.3 && ratio < 2.5,
            "level {level}: ratio {ratio}"
        );
        prev = e;
    }
}

#[test]
fn zero_catalyst_is_absorbing() {
    let p = RawParams {
        alpha11: 0.5,
        beta11: -1.0,
        beta22: -1.0,
        m: JumpMeasure::atomic([([0.0, 0.5], 1.0)]).unwrap(),
        mu: JumpMeasure::atomic([([1.0, 1.0], 2.0)]).unwrap(),
        ..Default::default()
    }
    .validate()
    .unwrap();
    for seed in 0..20 {
        let b = simulate_affine(&p, 0.0, 1.0, &noise_for(&p, 2.0, 1.0 / 128.0, seed)).unwrap();
        assert!(b.component("x").unwrap().iter().all(|&x| x == 0.0));
    }
}

#[test]
fn same_noise_same_bits() {
    let p = examples::full_jump_affine();
    for seed in [0, 1, u64::MAX] {
        let n1 = noise_for(&p, 1.0, 1.0 / 256.0, seed);
        let n2 = noise_for(&p, 1.0, 1.0 / 256.0, seed);
        let a = simulate_affine(&p, 1.0, 0.5, &n1).unwrap();
        let b = simulate_affine(&p, 1.0, 0.5, &n2).unwrap();
        for name in ["x", "z"] {
            let (u, v) = (a.component(name).unwrap(), b.component(name).unwrap());
            assert!(u.iter().zip(v).all(|(s, t)| s.to_bits() == t.to_bits()));
        }
    }
}

#[test]
fn catalyst_is_shared_across_systems() {
    // every system drives x with the same step, so x agrees bit for bit
    let p = examples::full_jump_affine();
    let noise = noise_for(&p, 1.0, 1.0 / 256.0, 4);
    let affine = simulate_affine(&p, 1.0, 0.5, &noise).unwrap();
    let cat = simulate_catalytic(&p, 1.0, 0.5, 0.7, &noise).unwrap();
    let single =
        simulate_reactant_pair(&p, ReactantMode::Single, 4.0, 1.0, [4.5, 0.0], &noise).unwrap();
    let x = affine.component("x").unwrap();
    assert_eq!(cat.component("x").unwrap(), x);
    assert_eq!(single.component("x").unwrap(), x);
}

#[test]
fn voc_agrees_with_euler_to_first_order() {
    let p = examples::full_jump_affine();
    let mut gaps = Vec::new();
    for level in [7, 8, 9] {
        let dt = 0.5f64.powi(level);
        let mut total = 0.0;
        for i in 0..50 {
            let noise = noise_for(&p, 1.0, dt, substream_seed(3, i));
            let b = simulate_affine(&p, 1.0, 0.5, &noise).unwrap();
            let voc = simulate_affine_voc(&p, b.component("x").unwrap(), 0.5, &noise).unwrap();
            total += max_abs_diff(b.component("z").unwrap(), &voc);
        }
        gaps.push(total / 50.0);
    }
    assert!(gaps[0] < 0.05, "{gaps:?}");
    assert!(
        gaps[1] < gaps[0] / 1.3 && gaps[2] < gaps[1] / 1.3,
        "{gaps:?}"
    );
}

#[test]
fn voc_rejects_wrong_length() {
    let p = examples::full_jump_affine();
    let noise = noise_for(&p, 1.0, 1.0 / 64.0, 0);
    assert!(matches!(
        simulate_affine_voc(&p, &[1.0; 3], 0.0, &noise),
        Err(SdeError::GridMismatch { .. })
    ));
}

#[test]
fn ordered_starts_stay_ordered_without_diffusion() {
    let p = RawParams {
        b1: 0.3,
        beta11: -0.8,
        beta22: -1.0,
        m: JumpMeasure::atomic([([0.5, 0.3], 0.6)]).unwrap(),
        mu: JumpMeasure::atomic([([0.4, 0.2], 0.8), ([0.3, -0.3], 0.5)]).unwrap(),
        ..Default::default()
    }
    .validate()
    .unwrap();
    for seed in 0..50 {
        let noise = noise_for(&p, 2.0, 1.0 / 128.0, seed);
        let lo = simulate_affine(&p, 0.5, 0.0, &noise).unwrap();
        let hi = simulate_affine(&p, 1.5, 0.0, &noise).unwrap();
        let (a, b) = (lo.component("x").unwrap(), hi.component("x").unwrap());
        assert!(a.iter().zip(b).all(|(u, v)| u <= v), "seed {seed}");
    }
}

#[test]
fn coupled_catalysts_contract_in_mean() {
    // E|X - X'| at time t is at most e^{beta11 t} |x0 - x0'| up to Monte Carlo error
    let p = examples::full_jump_affine();
    let n = 2000;
    let gaps: Vec<f64> = (0..n)
        .map(|i| {
            let noise = noise_for(&p, 1.0, 1.0 / 256.0, substream_seed(11, i));
            let a = simulate_affine(&p, 0.5, 0.0, &noise).unwrap();
            let b = simulate_affine(&p, 1.5, 0.0, &noise).unwrap();
            (a.component("x").unwrap().last().unwrap() - b.component("x").unwrap().last().unwrap())
                .abs()
        })
        .collect();
    let mean = gaps.iter().sum::<f64>() / n as f64;
    let sd = (gaps.iter().map(|g| (g - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0)).sqrt();
    let bound = (-0.8f64).exp();
    assert!(
        mean <= bound + 3.0 * sd / (n as f64).sqrt() + 0.01,
        "{mean} vs {bound}"
    );
}

#[test]
fn catalyst_mean_follows_first_moment() {
    let p = examples::full_jump_affine();
    let n = 4000;
    let mut sum = 0.0;
    let mut sq = 0.0;
    for i in 0..n {
        let noise = noise_for(&p, 1.0, 1.0 / 256.0, substream_seed(21, i));
        let x = *simulate_affine(&p, 1.0, 0.0, &noise)
            .unwrap()
            .component("x")
            .unwrap()
            .last()
            .unwrap();
        sum += x;
        sq += x * x;
    }
    let mean = sum / n as f64;
    let se = ((sq / n as f64 - mean * mean) / n as f64).sqrt();
    let exact = moment_functionals(&p).mean_x(1.0, 1.0);
    // first-order Euler bias of the linear mean ODE is well below 0.01 here
    assert!((mean - exact).abs() < 3.0 * se + 0.01, "{mean} vs {exact}");
}

#[test]
fn reactant_without_noise_relaxes_exponentially() {
    // with b2 = beta21 = 0 and no noise, z_k' = beta22 z_k
    let p = RawParams {
        beta22: -1.0,
        b1: 0.2,
        ..Default::default()
    }
    .validate()
    .unwrap();
    let dt = 1.0 / 1024.0;
    let noise = noise_for(&p, 1.0, dt, 0);
    for theta in [1.0, 10.0, 100.0] {
        let b = simulate_reactant_pair(
            &p,
            ReactantMode::Single,
            theta,
            1.0,
            [theta + 2.0, 0.0],
            &noise,
        )
        .unwrap();
        let z = b.component("z_k").unwrap();
        for (k, &v) in z.iter().enumerate() {
            let t = noise.grid().time(k);
            assert!(
                (v - 2.0 * (-t).exp()).abs() < 2.0 * dt,
                "theta {theta} t {t}"
            );
        }
    }
}

#[test]
fn pair_mode_recombines() {
    let p = examples::full_jump_affine();
    let d = Decomposition::positive_parts(&p);
    let noise = noise_for(&p, 1.0, 1.0 / 256.0, 8);
    let b =
        simulate_reactant_pair(&p, ReactantMode::Pair(d), 16.0, 1.0, [16.5, 16.0], &noise).unwrap();
    let (yp, ym, z) = (
        b.component("y_plus").unwrap(),
        b.component("y_minus").unwrap(),
        b.component("z_k").unwrap(),
    );
    assert_eq!(z[0], 0.5);
    for k in 0..z.len() {
        assert_eq!(z[k], yp[k] - ym[k]);
        assert!(yp[k] >= 0.0 && ym[k] >= 0.0);
    }
}

#[test]
fn bad_decomposition_is_rejected() {
    let p = examples::full_jump_affine();
    let mut d = Decomposition::positive_parts(&p);
    d.b2_plus += 0.1;
    let noise = noise_for(&p, 1.0, 1.0 / 64.0, 0);
    let r = simulate_reactant_pair(&p, ReactantMode::Pair(d), 4.0, 1.0, [4.0, 4.0], &noise);
    assert!(matches!(r, Err(SdeError::Decomposition(_))));
    let scheme = AffineScheme::new(&p, 1e-4).unwrap();
    assert!(matches!(
        scheme.simulate_limit(ReactantMode::Pair(d), 1.0, 0.0, &noise),
        Err(SdeError::Decomposition(_))
    ));
}

#[test]
fn limit_pair_is_the_affine_system() {
    let p = examples::full_jump_affine();
    let noise = noise_for(&p, 1.0, 1.0 / 256.0, 2);
    let scheme = AffineScheme::new(&p, 1e-4).unwrap();
    let d = Decomposition::positive_parts(&p);
    let lim = scheme
        .simulate_limit(ReactantMode::Pair(d), 1.0, 0.3, &noise)
        .unwrap();
    assert_eq!(lim, simulate_affine(&p, 1.0, 0.3, &noise).unwrap());
}

#[test]
fn reactants_need_negative_beta22() {
    let p = RawParams {
        beta22: 0.0,
        ..Default::default()
    }
    .validate()
    .unwrap();
    let noise = noise_for(&p, 1.0, 1.0 / 64.0, 0);
    let r = simulate_reactant_pair(&p, ReactantMode::Single, 2.0, 1.0, [2.0, 0.0], &noise);
    assert!(matches!(r, Err(SdeError::NonNegativeBeta22(_))));
}

#[test]
fn coarse_steps_are_refused() {
    let p = RawParams {
        beta22: -4.0,
        ..Default::default()
    }
    .validate()
    .unwrap();
    let noise = noise_for(&p, 1.0, 1.0 / 16.0, 0);
    assert!(matches!(
        simulate_affine(&p, 1.0, 0.0, &noise),
        Err(SdeError::Unstable { .. })
    ));
}

#[test]
fn budget_overrun_returns_partial_path() {
    let p = examples::full_jump_affine();
    let grid = TimeGrid::new(1.0, 1.0 / 64.0).unwrap();
    let noise = generate_noise(p.m(), p.mu(), grid, 3, 0, 0.5, 1e-4).unwrap();
    match simulate_affine(&p, 1.0, 0.0, &noise) {
        Err(SdeError::BudgetExceeded(b)) => {
            assert_eq!(b.aborted_at, Some(0.0));
            assert_eq!(b.component("x").unwrap(), &[1.0]);
        }
        other => panic!("expected a budget error, got {other:?}"),
    }
}

#[test]
fn csv_rows_have_one_line_per_grid_point() {
    let p = examples::full_jump_affine();
    let noise = noise_for(&p, 0.25, 1.0 / 16.0, 0);
    let b = simulate_affine(&p, 1.0, 0.0, &noise).unwrap();
    assert_eq!(b.csv_header(), "path_id,t,x,z");
    let mut buf = Vec::new();
    b.write_csv_rows(&mut buf, 3).unwrap();
    let s = String::from_utf8(buf).unwrap();
    assert_eq!(s.lines().count(), 5);
    assert!(s
        .lines()
        .all(|l| l.starts_with("3,") && l.split(',').count() == 4));
}

fn cbi_noise(t_max: f64, dt: f64, seed: u64) -> NoiseSystem {
    let e = JumpMeasure::empty();
    generate_noise(
        &e,
        &e,
        TimeGrid::new(t_max, dt).unwrap(),
        2,
        seed,
        8.0,
        1e-4,
    )
    .unwrap()
}

#[test]
fn generalized_cbi_pure_immigration_is_linear() {
    let e = JumpMeasure::empty();
    let spec =
        GeneralizedCbiSpec::constant(0.0, 0.0, vec![0.0], 1.0, 0.0, 0.0, e.clone(), e).unwrap();
    let b = simulate_generalized_cbi(&spec, 0.0, &cbi_noise(2.0, 1.0 / 64.0, 0)).unwrap();
    for (t, x) in b.times().iter().zip(b.component("x").unwrap()) {
        assert!((x - t).abs() < 1e-12);
    }
}

#[test]
fn generalized_cbi_zero_is_absorbing() {
    let e = JumpMeasure::empty();
    let mu = JumpMeasure::atomic([([1.0, 0.0], 1.0)]).unwrap();
    let spec = GeneralizedCbiSpec::constant(
        1.0,
        1.0,
        vec![1.0, 0.5],
        0.0,
        -1.0,
        1.0,
        e.clone(),
        mu.clone(),
    )
    .unwrap();
    let grid = TimeGrid::new(1.0, 1.0 / 128.0).unwrap();
    for seed in 0..10 {
        let noise = generate_noise(&e, &mu, grid, 2, seed, 8.0, 1e-4).unwrap();
        let b = simulate_generalized_cbi(&spec, 0.0, &noise).unwrap();
        assert!(b.component("x").unwrap().iter().all(|&x| x == 0.0));
    }
}

#[test]
fn generalized_cbi_time_dependent_immigration() {
    // x' = 1 + t from 0 gives t + t^2/2; Euler is exact up to dt t / 2
    let e = JumpMeasure::empty();
    let mut spec =
        GeneralizedCbiSpec::constant(0.0, 0.0, vec![0.0], 2.0, 0.0, 0.0, e.clone(), e).unwrap();
    spec.b = Coefficient::Fn(Arc::new(|t| 1.0 + t));
    spec.bounds.b_bar = StepFunction::new(vec![0.0, 1.0], vec![2.0, 2.0]).unwrap();
    let dt = 1.0 / 256.0;
    let b = simulate_generalized_cbi(&spec, 0.0, &cbi_noise(1.0, dt, 0)).unwrap();
    let x = *b.component("x").unwrap().last().unwrap();
    assert!((x - 1.5).abs() <= 0.5 * dt + 1e-12, "{x}");
}

#[test]
fn generalized_cbi_checks_bounds_and_paths() {
    let e = JumpMeasure::empty();
    let mut spec =
        GeneralizedCbiSpec::constant(0.0, 0.0, vec![0.5], 1.0, 0.0, 0.0, e.clone(), e).unwrap();
    spec.b = Coefficient::Fn(Arc::new(|t| 1.0 + t));
    let noise = cbi_noise(1.0, 1.0 / 64.0, 0);
    assert!(matches!(
        simulate_generalized_cbi(&spec, 1.0, &noise),
        Err(SdeError::CoefficientBound { name: "b", .. })
    ));
    spec.b = Coefficient::Path(vec![1.0; 10]);
    assert!(matches!(
        simulate_generalized_cbi(&spec, 1.0, &noise),
        Err(SdeError::GridMismatch { .. })
    ));
    spec.b = Coefficient::Path(vec![1.0; 65]);
    assert!(simulate_generalized_cbi(&spec, 1.0, &noise).is_ok());
    spec.sigma = vec![Coefficient::Constant(0.1); 3];
    assert!(matches!(
        simulate_generalized_cbi(&spec, 1.0, &noise),
        Err(SdeError::NotEnoughBrownian { needed: 3, got: 2 })
    ));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn nonnegative_components_stay_nonnegative(seed in any::<u64>(), x0 in 0.0f64..3.0, y0 in 0.0f64..3.0) {
        let p = examples::full_jump_affine();
        let noise = noise_for(&p, 1.0, 1.0 / 128.0, seed);
        let a = simulate_affine(&p, x0, 0.0, &noise).unwrap();
        prop_assert!(a.component("x").unwrap().iter().all(|&v| v >= 0.0));
        let c = simulate_catalytic(&p, x0, y0, 0.5, &noise).unwrap();
        prop_assert!(c.component("y").unwrap().iter().all(|&v| v >= 0.0));
        let d = Decomposition::positive_parts(&p);
        let r = simulate_reactant_pair(&p, ReactantMode::Pair(d), 4.0, x0, [4.0 + y0, 4.0], &noise).unwrap();
        prop_assert!(r.component("y_minus").unwrap().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn refined_noise_runs_on_the_finer_grid(seed in any::<u64>()) {
        let p = examples::full_jump_affine();
        let noise = noise_for(&p, 0.5, 1.0 / 64.0, seed);
        let fine = noise.refine();
        let b = simulate_affine(&p, 1.0, 0.0, &fine).unwrap();
        prop_assert_eq!(b.len(), 2 * noise.grid().n_steps() + 1);
        prop_assert_eq!(b.refinement, 1);
    }
}
