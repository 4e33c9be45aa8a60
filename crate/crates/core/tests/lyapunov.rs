use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use switchode::env_chain::{EnvGenerator, EnvKind, StationaryDist};
use switchode::expansion::c1_generic;
use switchode::lyapunov::*;
use switchode::pdmp_sim::SimConfig;
use switchode::Error;

fn fmc() -> (DMatrix<f64>, DMatrix<f64>) {
    (
        DMatrix::from_row_slice(3, 3, &[-1.0, 0.0, 0.0, 10.0, -1.0, 0.0, 0.0, 0.0, -10.0]),
        DMatrix::from_row_slice(3, 3, &[-10.0, 0.0, 10.0, 0.0, -10.0, 0.0, 0.0, 10.0, -1.0]),
    )
}

fn random_cooperative(d: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(d, d, |i, j| {
        if i == j {
            rng.random_range(-4.0..1.0)
        } else {
            rng.random_range(0.05..2.0)
        }
    })
}

fn dense_top_eigenvalue(a: &DMatrix<f64>) -> f64 {
    a.clone()
        .complex_eigenvalues()
        .iter()
        .map(|z| z.re)
        .fold(f64::NEG_INFINITY, f64::max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn perron_invariants(seed in any::<u64>(), d in 2usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_cooperative(d, &mut rng);
        let pp = perron_of(&a).unwrap();
        let (x, y) = (pp.x(), pp.y());
        prop_assert!((&a * &x - &x * pp.lambda_max).amax() < 1e-10);
        prop_assert!((a.transpose() * &y - &y * pp.lambda_max).amax() < 1e-10);
        prop_assert!(x.iter().all(|v| *v > 0.0));
        prop_assert!((x.sum() - 1.0).abs() < 1e-12);
        prop_assert!((x.dot(&y) - 1.0).abs() < 1e-12);
        prop_assert!((pp.lambda_max - dense_top_eigenvalue(&a)).abs() < 1e-8);
    }

    #[test]
    fn closed_forms_agree(seed in any::<u64>(), p in 0.05f64..0.95) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a0 = random_cooperative(3, &mut rng);
        let a1 = random_cooperative(3, &mut rng);
        let sys = SwitchedLinearSystem::two_state(a0.clone(), a1.clone(), p).unwrap();
        let pp = perron(&sys).unwrap();
        let c1 = c1_closed_form(&sys, &pp).unwrap();
        let c2 = c1_two_state(&a0, &a1, p, &pp);
        prop_assert!((c1 - c2).abs() < 1e-9 * (1.0 + c2.abs()));
    }

    #[test]
    fn resample_c1_below_jensen_bound(seed in any::<u64>(), n in 2usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ms: Vec<DMatrix<f64>> = (0..n).map(|_| random_cooperative(3, &mut rng)).collect();
        let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..1.0)).collect();
        let total: f64 = w.iter().sum();
        let pi = StationaryDist::new(w.iter().map(|v| v / total).collect()).unwrap();
        let sys = SwitchedLinearSystem::new(ms.clone(), EnvKind::Resample(pi.clone())).unwrap();
        let pp = perron(&sys).unwrap();
        let r = resample_bound(&ms, &pi, &pp);
        let c1 = c1_closed_form(&sys, &pp).unwrap();
        prop_assert!((c1 - r.c1).abs() < 1e-9 * (1.0 + c1.abs()));
        prop_assert!(r.c1 <= r.bound + 1e-9 * (1.0 + r.bound.abs()));
    }
}

#[test]
fn closed_form_matches_generic_expansion() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for d in [2usize, 3, 4] {
        for _ in 0..2 {
            let a0 = random_cooperative(d, &mut rng);
            let a1 = random_cooperative(d, &mut rng);
            let p = rng.random_range(0.2..0.8);
            let sys = SwitchedLinearSystem::two_state(a0, a1, p).unwrap();
            let pp = perron(&sys).unwrap();
            let closed = c1_closed_form(&sys, &pp).unwrap();
            let model = sys.projective_model().unwrap();
            let r = c1_generic(&model, &sys.growth_observable(), None).unwrap();
            assert!((r.mu0_f - pp.lambda_max).abs() < 1e-9);
            assert!(
                (r.c1 - closed).abs() < 1e-6 * (1.0 + closed.abs()),
                "d={d}: {} vs {closed}",
                r.c1
            );
        }
    }
}

#[test]
fn fmc_single_matrix_is_reducible_and_limit_is_minus_one() {
    let (a0, a1) = fmc();
    assert!(matches!(perron_of(&a0), Err(Error::NotIrreducible { .. })));
    assert!((dense_top_eigenvalue(&a0) + 1.0).abs() < 1e-12);
    let l = |p: f64| {
        perron(&SwitchedLinearSystem::two_state(a0.clone(), a1.clone(), p).unwrap())
            .unwrap()
            .lambda_max
    };
    assert!((l(1e-3) + 1.0).abs() < 2e-3);
    assert!((l(1e-3) + 1.0).abs() < (l(1e-2) + 1.0).abs());
}

#[test]
fn equal_matrices_sweep_has_zero_c1() {
    let (a0, _) = fmc();
    let a = &a0 + DMatrix::from_row_slice(3, 3, &[0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
    let rows = sweep_p(&a, &a, &default_p_grid()).unwrap();
    assert_eq!(rows.len(), 99);
    assert!(rows.iter().all(|r| r.c1.abs() < 1e-12));
}

#[test]
fn fmc_sweep_reference_values() {
    let (a0, a1) = fmc();
    let rows = sweep_p(&a0, &a1, &[0.3, 0.4, 0.5]).unwrap();
    let expect = [(-0.627304, 35.3488), (-0.549289, 31.1881), (-0.5, 26.8889)];
    for (r, (l, c)) in rows.iter().zip(expect) {
        assert!((r.lambda_max - l).abs() < 1e-5, "{r:?}");
        assert!((r.c1 - c).abs() < 1e-3, "{r:?}");
    }
}

fn mc_cfg(eps: f64, horizon: f64) -> SimConfig {
    let mut cfg = SimConfig::new(eps, horizon);
    cfg.n_traj = 2;
    cfg
}

#[test]
fn constant_system_exponent() {
    let a = DMatrix::from_row_slice(2, 2, &[-1.0, 2.0, 0.5, -2.0]);
    let env = EnvKind::RateMatrix(EnvGenerator::two_state(1.0, 2.0).unwrap());
    let sys = SwitchedLinearSystem::new(vec![a.clone(), a.clone()], env).unwrap();
    let est = lyapunov_mc(&sys, &mc_cfg(0.1, 200.0)).unwrap();
    let lam = dense_top_eigenvalue(&a);
    assert!(
        (est.log_growth.mean - lam).abs() <= 3.0 * est.log_growth.std_error + 1e-9,
        "{:?} {lam}",
        (est.log_growth.mean, est.log_growth.std_error, est.ergodic.mean)
    );
    assert!(est.consistent());
}

#[test]
fn commuting_diagonal_exponent() {
    // a weak irreducible coupling keeps Ā in the admissible class
    let c = 1e-9;
    let a0 = DMatrix::from_row_slice(2, 2, &[-1.0, c, c, -3.0]);
    let a1 = DMatrix::from_row_slice(2, 2, &[-2.0, c, c, 0.5]);
    let env = EnvKind::RateMatrix(EnvGenerator::two_state(1.0, 1.0).unwrap());
    let sys = SwitchedLinearSystem::new(vec![a0, a1], env).unwrap();
    let est = lyapunov_mc(&sys, &mc_cfg(0.05, 400.0)).unwrap();
    // max over i of Σ_s π_s A(s)_ii
    let expect = f64::max(-1.5, -1.25);
    let e = &est.log_growth;
    assert!(
        (e.mean - expect).abs() <= 3.0 * e.std_error + 1e-3,
        "{} ± {}",
        e.mean,
        e.std_error
    );
    assert!(est.consistent());
}

#[test]
fn fmc_small_epsilon_matches_first_order() {
    let (a0, a1) = fmc();
    let sys = SwitchedLinearSystem::two_state(a0, a1, 0.4).unwrap();
    let pp = perron(&sys).unwrap();
    let c1 = c1_closed_form(&sys, &pp).unwrap();
    let eps = 0.001;
    let mut cfg = mc_cfg(eps, 600.0);
    cfg.sample_dt = None;
    let est = lyapunov_mc(&sys, &cfg).unwrap();
    // second-order coefficient of order 10³ from an ε-sweep of the same model
    let k = 2000.0;
    let e = &est.log_growth;
    let gap = (e.mean - pp.lambda_max - eps * c1).abs();
    assert!(
        gap <= f64::max(3.0 * e.std_error, k * eps * eps),
        "{gap} ({} ± {})",
        e.mean,
        e.std_error
    );
    assert!(est.consistent());
}

#[test]
fn shift_moves_exponent_by_delta_pathwise() {
    let (a0, a1) = fmc();
    let sys = SwitchedLinearSystem::two_state(a0, a1, 0.4).unwrap();
    let cfg = mc_cfg(0.1, 100.0);
    let base = lyapunov_mc(&sys, &cfg).unwrap().log_growth;
    let shifted = lyapunov_mc(&sys.shifted(0.3).unwrap(), &cfg).unwrap().log_growth;
    assert!((shifted.mean - base.mean - 0.3).abs() < 1e-9);
    assert!((shifted.mean - base.mean - 0.3).abs() <= 3.0 * shifted.std_error);
}

#[test]
fn stable_pair_yields_no_certificate() {
    let a = -DMatrix::<f64>::identity(2, 2) + DMatrix::from_element(2, 2, 0.0);
    let mut a = a;
    a[(0, 1)] = 1e-3;
    a[(1, 0)] = 1e-3;
    let opts = CertifyOptions {
        p_grid: vec![0.25, 0.5, 0.75],
        eps_grid: vec![0.1],
        margin: 0.05,
        screen_p: vec![0.25, 0.5, 0.75],
        screen_horizon: 40.0,
        confirm: 2,
        mc: mc_cfg(0.1, 50.0),
    };
    let cert = destabilization_certificate(&a, &a, &opts).unwrap();
    match cert {
        Certificate::NotFound {
            trials,
            screening,
            shifted_lambda_max,
            ..
        } => {
            assert_eq!(screening.len(), 3);
            assert_eq!(trials.len(), 2);
            assert!(shifted_lambda_max < 0.0);
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn growth_observable_is_column_sums() {
    let (a0, a1) = fmc();
    let sys = SwitchedLinearSystem::two_state(a0.clone(), a1, 0.5).unwrap();
    let f = sys.growth_observable();
    let th = DVector::from_vec(vec![0.2, 0.3, 0.5]);
    let expect: f64 = (&a0 * &th).sum();
    assert!((f.eval(&th, 0) - expect).abs() < 1e-14);
}
