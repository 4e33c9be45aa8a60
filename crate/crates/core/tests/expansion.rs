use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use switchode::env_chain::{EnvGenerator, EnvKind, StationaryDist};
use switchode::expansion::{c1_generic, h_dim1, semigroup_order0, semigroup_order1};
use switchode::flows::{FieldFn, Region, VectorFieldSet};
use switchode::linalg::expm;
use switchode::observable::ObservableF;
use switchode::pdmp_sim::ModulatedModel;
use switchode::Error;

fn two_state_x(p: f64, q: f64) -> DMatrix<f64> {
    DMatrix::from_row_slice(2, 2, &[-p, p, q, -q]) / ((p + q) * (p + q))
}

fn linear_obs(c: [f64; 2], b: [f64; 2]) -> ObservableF {
    ObservableF::quadratic(
        c.to_vec(),
        b.iter().map(|v| DVector::from_element(1, *v)).collect(),
        None,
    )
    .unwrap()
}

/// Invasion-rate coefficient for the logistic resident, written directly
/// from the averaged coefficients.
fn logistic_c1_oracle(a10: [f64; 2], a11: [f64; 2], a21: [f64; 2], p: f64, q: f64) -> f64 {
    let pi = [q / (p + q), p / (p + q)];
    let bar = |a: [f64; 2]| pi[0] * a[0] + pi[1] * a[1];
    let (b10, b11, b21) = (bar(a10), bar(a11), bar(a21));
    let x = two_state_x(p, q);
    let u = DVector::from_fn(2, |s, _| a11[s] / b11 - a21[s] / b21);
    let xu = &x * u;
    let sum: f64 = (0..2).map(|s| pi[s] * (a10[s] / b10 - a11[s] / b11) * xu[s]).sum();
    b21 * b10 * b10 / b11 * sum
}

#[test]
fn logistic_c1_matches_closed_form() {
    for (a10, a11, a21, p, q) in [
        ([1.0, 2.0], [2.0, 1.0], [-1.0, -0.5], 1.0, 1.0),
        ([1.0, 3.0], [1.0, 1.5], [0.5, -2.0], 2.0, 0.5),
        ([2.0, 2.0], [1.0, 3.0], [-1.0, -1.0], 1.0, 3.0),
    ] {
        let fields = VectorFieldSet::logistic(a10.to_vec(), a11.to_vec()).unwrap();
        let env = EnvKind::RateMatrix(EnvGenerator::two_state(p, q).unwrap());
        let model = ModulatedModel::new(fields, env).unwrap();
        let f = linear_obs([0.3, -0.2], a21);
        let r = c1_generic(&model, &f, None).unwrap();
        let expect = logistic_c1_oracle(a10, a11, a21, p, q);
        assert!(r.converged, "{:?}", r.diagnostics);
        assert!(
            (r.c1 - expect).abs() < 1e-6 * (1.0 + expect.abs()),
            "{} vs {}",
            r.c1,
            expect
        );
    }
}

#[test]
fn unmodulated_field_has_zero_c1() {
    let fields = VectorFieldSet::logistic(vec![1.5, 1.5], vec![1.0, 1.0]).unwrap();
    let env = EnvKind::RateMatrix(EnvGenerator::two_state(1.0, 2.0).unwrap());
    let model = ModulatedModel::new(fields, env).unwrap();
    let f = linear_obs([0.0, 0.0], [1.0, 1.0]);
    let r = c1_generic(&model, &f, None).unwrap();
    assert!(r.c1.abs() < 1e-9, "{}", r.c1);
    assert!((r.mu0_f - 1.5).abs() < 1e-10);
}

fn fmc(p: f64) -> (Vec<DMatrix<f64>>, EnvKind) {
    let a0 = DMatrix::from_row_slice(3, 3, &[-1.0, 0.0, 0.0, 10.0, -1.0, 0.0, 0.0, 0.0, -10.0]);
    let a1 = DMatrix::from_row_slice(3, 3, &[-10.0, 0.0, 10.0, 0.0, -10.0, 0.0, 0.0, 10.0, -1.0]);
    let env = EnvKind::RateMatrix(EnvGenerator::two_state(p, 1.0 - p).unwrap());
    (vec![a0, a1], env)
}

/// c₁ for the top exponent from the Perron pair of Ā and the pseudo-inverse.
fn lyapunov_c1_oracle(ms: &[DMatrix<f64>], pi: &[f64], x: &DMatrix<f64>) -> f64 {
    let abar = ms.iter().zip(pi).fold(DMatrix::zeros(3, 3), |acc, (m, p)| acc + m * *p);
    // Perron vectors by repeated application of a long-time propagator
    let prop = expm(&(&abar * 5.0));
    let mut xb = DVector::from_element(3, 1.0);
    let mut yb = DVector::from_element(3, 1.0);
    for _ in 0..400 {
        xb = &prop * &xb;
        xb /= xb.sum();
        yb = prop.transpose() * &yb;
        yb /= yb.sum();
    }
    yb /= yb.dot(&xb);
    let outer = &xb * yb.transpose() - DMatrix::identity(3, 3);
    let mut c1 = 0.0;
    for s in 0..ms.len() {
        let mix = (0..ms.len()).fold(DMatrix::zeros(3, 3), |acc, sp| acc + &ms[sp] * x[(s, sp)]);
        c1 += pi[s] * (yb.transpose() * mix * &outer * &ms[s] * &xb)[0];
    }
    c1
}

#[test]
fn projective_c1_matches_perron_formula() {
    for p in [0.3, 0.4, 0.5] {
        let (ms, env) = fmc(p);
        let fields = VectorFieldSet::projective(ms.clone()).unwrap();
        let model = ModulatedModel::new(fields, env).unwrap();
        let ones = DVector::from_element(3, 1.0);
        let f = ObservableF::quadratic(vec![0.0; 2], ms.iter().map(|m| m.transpose() * &ones).collect(), None).unwrap();
        let r = c1_generic(&model, &f, None).unwrap();
        let x = two_state_x(p, 1.0 - p);
        let expect = lyapunov_c1_oracle(&ms, &[1.0 - p, p], &x);
        assert!(
            (r.c1 - expect).abs() < 1e-5 * expect.abs(),
            "p={p}: {} vs {}",
            r.c1,
            expect
        );
    }
}

#[test]
fn projective_c1_frozen_values() {
    // independent evaluation of the two-state Perron formula
    for (p, c1) in [(0.3, 35.349), (0.4, 31.188), (0.5, 26.889)] {
        let (ms, _) = fmc(p);
        let x = two_state_x(p, 1.0 - p);
        let v = lyapunov_c1_oracle(&ms, &[1.0 - p, p], &x);
        assert!((v - c1).abs() < 2e-3, "p={p}: {v}");
    }
}

fn relaxation_model() -> ModulatedModel {
    let fields: Vec<FieldFn> = [0.0, 2.0]
        .iter()
        .map(|&a| {
            let f: FieldFn = Arc::new(move |x: &DVector<f64>| DVector::from_element(1, a - x[0]));
            f
        })
        .collect();
    let vfs = VectorFieldSet::general(1, fields, Region::Interval { lo: -1.0, hi: 3.0 }).unwrap();
    ModulatedModel::new(vfs, EnvKind::RateMatrix(EnvGenerator::two_state(1.0, 2.0).unwrap())).unwrap()
}

fn relaxation_obs() -> ObservableF {
    ObservableF::quadratic(
        vec![0.0, 0.0],
        vec![DVector::from_element(1, 1.0), DVector::from_element(1, -1.0)],
        Some(vec![DMatrix::from_element(1, 1, 1.0); 2]),
    )
    .unwrap()
}

/// E_{x0,s0} f(X_t, σ_t) by closing the moment equations of (1, X, X²) per state.
fn moment_closure(eps: f64, t: f64, x0: f64, s0: usize) -> f64 {
    let a = [0.0, 2.0];
    let b = [1.0, -1.0];
    let qt = DMatrix::from_row_slice(2, 2, &[-1.0, 2.0, 1.0, -2.0]) / eps;
    let mut g = DMatrix::zeros(6, 6);
    for k in 0..3 {
        let mut blk = qt.clone();
        for i in 0..2 {
            blk[(i, i)] -= k as f64;
        }
        g.view_mut((2 * k, 2 * k), (2, 2)).copy_from(&blk);
        if k > 0 {
            for i in 0..2 {
                g[(2 * k + i, 2 * (k - 1) + i)] = k as f64 * a[i];
            }
        }
    }
    let mut v0 = DVector::zeros(6);
    v0[s0] = 1.0;
    v0[2 + s0] = x0;
    v0[4 + s0] = x0 * x0;
    let v = expm(&(g * t)) * v0;
    v[4] + v[5] + b[0] * v[2] + b[1] * v[3]
}

#[test]
fn semigroup_expansion_against_moment_closure() {
    let model = relaxation_model();
    let f = relaxation_obs();
    let (t, x0, s0) = (1.0, 0.5, 0);
    let x = DVector::from_element(1, x0);
    let p1 = semigroup_order1(&model, &f, t, &x, s0).unwrap();
    assert!(p1.converged, "{p1:?}");
    // slope of (E f − P0 − S0)/ε from Richardson on the exact values
    let mut prev = None;
    for eps in [0.02, 0.01, 0.005] {
        let (p0, s0v) = semigroup_order0(&model, &f, t, t / eps, &x, s0).unwrap();
        let r = (moment_closure(eps, t, x0, s0) - p0 - s0v) / eps;
        if let Some(rp) = prev {
            let rich: f64 = 2.0 * r - rp;
            assert!((rich - p1.value).abs() < 2e-4, "eps={eps}: {rich} vs {}", p1.value);
        }
        prev = Some(r);
    }
    assert!((p1.value + 0.1663).abs() < 5e-4, "{}", p1.value);
}

#[test]
fn h_dim1_matches_logistic_closed_form() {
    // F̄(x) = x(1 − x), πf(x) = x: h(x) = ∫ (y − 1)/(y(1 − y)) dy = −ln x
    let fields = VectorFieldSet::logistic(vec![1.0, 1.0], vec![1.0, 1.0]).unwrap();
    let env = EnvKind::Resample(StationaryDist::new(vec![0.5, 0.5]).unwrap());
    let model = ModulatedModel::new(fields, env).unwrap();
    let f = linear_obs([0.0, 0.0], [1.0, 1.0]);
    let h = h_dim1(&model, &f, 1.0).unwrap();
    for x in [0.2, 0.5, 0.99, 0.99995, 1.00003] {
        let v = h.eval(x).unwrap();
        assert!((v + f64::ln(x)).abs() < 1e-9, "x={x}: {v}");
    }
}

#[test]
fn h_dim1_rejects_a_second_zero() {
    let fields = VectorFieldSet::logistic(vec![1.0, 1.0], vec![1.0, 1.0]).unwrap();
    let env = EnvKind::Resample(StationaryDist::new(vec![0.5, 0.5]).unwrap());
    let model = ModulatedModel::new(fields, env).unwrap();
    let f = linear_obs([0.0, 0.0], [1.0, 1.0]);
    let h = h_dim1(&model, &f, 1.0).unwrap();
    assert!(matches!(h.eval(-0.5), Err(Error::SingularInterior { .. })));
}
