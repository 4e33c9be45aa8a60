//! ε-expansion of invariant measures and of the semigroup.
//!
//! μ₀f = πf(x̄); the first-order coefficient is
//! c₁ = Σ_s π_s D_{F_s(x̄)} g(x̄, s) with g = Q⁻¹(L_c h − f) and
//! h(x) = ∫₀^∞ (πf(x̄) − πf(φ̄_r x)) dr.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flows::{self, AveragedField, Equilibrium};
use crate::linalg;
use crate::observable::ObservableF;
use crate::pdmp_sim::{self, ModulatedModel, SimConfig};
use crate::rng;
use crate::stats;

/// Relative finite-difference step: h_fd = FD_STEP·(1 + |x|).
pub const FD_STEP: f64 = 1e-5;
const C1_TOL: f64 = 1e-6;
const ORDER1_TOL: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpansionDiagnostics {
    pub fd_step: f64,
    /// |c₁(h) − c₁(h/2)| from the step-halving check.
    pub fd_halving_change: f64,
    /// Largest relative change of a directional derivative under step halving.
    pub max_relative_fd_change: f64,
    pub truncation_bound: f64,
    pub tangent_horizon: f64,
    pub tangent_steps: usize,
    pub equilibrium_residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpansionReport {
    pub mu0_f: f64,
    pub c1: f64,
    pub xbar: Vec<f64>,
    pub converged: bool,
    pub diagnostics: ExpansionDiagnostics,
    pub mc_slope: Option<(f64, f64)>,
}

/// Shared pieces of the first-order computations for one model.
struct Setup<'a> {
    model: &'a ModulatedModel,
    avg: AveragedField,
    x: DMatrix<f64>,
}

impl<'a> Setup<'a> {
    fn new(model: &'a ModulatedModel, f: &ObservableF) -> Result<Self> {
        if f.n_states() != model.env.n() {
            return Err(Error::invalid("observable and environment have different state counts"));
        }
        let avg = model.fields.average(model.pi())?;
        let x = model.env.pseudo_inverse()?.matrix().clone();
        Ok(Setup { model, avg, x })
    }

    fn n(&self) -> usize {
        self.model.env.n()
    }

    fn apply_x(&self, u: &[f64]) -> Vec<f64> {
        (&self.x * DVector::from_column_slice(u)).iter().copied().collect()
    }
}

/// The first-order coefficient c₁ of μ_ε f = μ₀ f + c₁ ε + O(ε²).
pub fn c1_generic(model: &ModulatedModel, f: &ObservableF, x_init: Option<&DVector<f64>>) -> Result<ExpansionReport> {
    let setup = Setup::new(model, f)?;
    let start = x_init.cloned().unwrap_or_else(|| model.default_start());
    let eq = flows::find_equilibrium(&setup.avg, &start)?;
    c1_at(&setup, f, &eq)
}

fn c1_at(setup: &Setup, f: &ObservableF, eq: &Equilibrium) -> Result<ExpansionReport> {
    let pi = setup.model.pi();
    let xbar = &eq.xbar;
    let grid = setup.avg.tangent_grid(eq)?;
    let grad_pif = |y: &DVector<f64>| f.pi_gradient(pi, y);
    let fields = &setup.model.fields;
    let n = setup.n();
    let mut truncation: f64 = 0.0;

    // g(y, ·) = X (L_c h − f)(y, ·)
    let mut g = |y: &DVector<f64>| -> Vec<f64> {
        let u: Vec<f64> = (0..n)
            .map(|sp| {
                let (dh, tail) = setup
                    .avg
                    .flow_integral_derivative(&grad_pif, y, &fields.eval(sp, y), &grid);
                truncation = truncation.max(tail);
                dh - f.eval(y, sp)
            })
            .collect();
        setup.apply_x(&u)
    };

    let h_fd = FD_STEP * (1.0 + xbar.norm());
    let mut c1_full = 0.0;
    let mut c1_half = 0.0;
    let mut c1 = 0.0;
    let mut max_rel: f64 = 0.0;
    for s in 0..n {
        let v = fields.eval(s, xbar);
        let vn = v.norm();
        if vn == 0.0 || pi.as_slice()[s] == 0.0 {
            continue;
        }
        let eta = h_fd / vn;
        let central = |g: &mut dyn FnMut(&DVector<f64>) -> Vec<f64>, e: f64| {
            (g(&(xbar + &v * e))[s] - g(&(xbar - &v * e))[s]) / (2.0 * e)
        };
        let d_full = central(&mut g, eta);
        let d_half = central(&mut g, 0.5 * eta);
        let rich = (4.0 * d_half - d_full) / 3.0;
        let w = pi.as_slice()[s];
        c1_full += w * d_full;
        c1_half += w * d_half;
        c1 += w * rich;
        let scale = d_half.abs().max(1e-8);
        max_rel = max_rel.max((d_half - d_full).abs() / scale);
    }
    let change = (c1_half - c1_full).abs();
    let mu0_f = f.pi_mean(pi, xbar);
    let converged = change <= C1_TOL && truncation < C1_TOL && c1.is_finite();
    Ok(ExpansionReport {
        mu0_f,
        c1,
        xbar: xbar.iter().copied().collect(),
        converged,
        diagnostics: ExpansionDiagnostics {
            fd_step: h_fd,
            fd_halving_change: change,
            max_relative_fd_change: max_rel,
            truncation_bound: truncation,
            tangent_horizon: grid.horizon,
            tangent_steps: grid.steps,
            equilibrium_residual: eq.residual,
        },
        mc_slope: None,
    })
}

/// h(x) = ∫_{x̄}^x (πf(y) − πf(x̄)) / F̄(y) dy for one-dimensional models.
pub struct HDim1 {
    avg: AveragedField,
    f: ObservableF,
    xbar: f64,
    fbar: f64,
    /// Limit of the integrand at y = x̄.
    limit: f64,
    /// Below this distance from x̄ the integrand is interpolated.
    delta: f64,
}

pub fn h_dim1(model: &ModulatedModel, f: &ObservableF, xbar: f64) -> Result<HDim1> {
    if model.fields.dim() != 1 {
        return Err(Error::invalid("h_dim1 needs a one-dimensional model"));
    }
    let avg = model.fields.average(model.pi())?;
    let pi = model.pi();
    let xb = DVector::from_element(1, xbar);
    let fbar = f.pi_mean(pi, &xb);
    let slope_f = avg.jacobian(&xb)[(0, 0)];
    if slope_f == 0.0 {
        return Err(Error::Degenerate("F̄'(x̄) = 0: the integrand is not removable".into()));
    }
    let limit = f.pi_gradient(pi, &xb)[0] / slope_f;
    Ok(HDim1 {
        avg,
        f: f.clone(),
        xbar,
        fbar,
        limit,
        delta: 1e-4 * (1.0 + xbar.abs()),
    })
}

impl HDim1 {
    fn direct(&self, y: f64) -> f64 {
        let yv = DVector::from_element(1, y);
        (self.f.pi_mean(self.avg.pi(), &yv) - self.fbar) / self.avg.eval(&yv)[0]
    }

    fn integrand(&self, y: f64) -> f64 {
        let d = y - self.xbar;
        if d.abs() >= self.delta {
            return self.direct(y);
        }
        // numerator and denominator both vanish linearly at x̄: interpolate
        // between the limit and the value at distance delta on the same side
        let edge = self.direct(self.xbar + self.delta.copysign(d));
        self.limit + (edge - self.limit) * d.abs() / self.delta
    }

    pub fn eval(&self, x: f64) -> Result<f64> {
        if x == self.xbar {
            return Ok(0.0);
        }
        let (lo, hi) = if x < self.xbar { (x, self.xbar) } else { (self.xbar, x) };
        // F̄ must keep one sign strictly between x and x̄
        let sign = self.avg.eval(&DVector::from_element(1, 0.5 * (lo + hi)))[0].signum();
        for k in 1..400 {
            let y = lo + (hi - lo) * k as f64 / 400.0;
            let v = self.avg.eval(&DVector::from_element(1, y))[0];
            if v == 0.0 || v.signum() != sign {
                return Err(Error::SingularInterior { x, y });
            }
        }
        let out = quadrature::integrate(|y| self.integrand(y), self.xbar, x, 1e-13);
        if !out.integral.is_finite() {
            return Err(Error::NonFinite("h quadrature".into()));
        }
        Ok(out.integral)
    }
}

/// Order-0 terms at (t, x, s): P0 = πf(φ̄_t x) and the boundary layer
/// S0 = (e^{τQ} f(x, ·))_s − πf(x) at layer time τ (t/ε for the ε-process).
pub fn semigroup_order0(
    model: &ModulatedModel,
    f: &ObservableF,
    t: f64,
    layer_time: f64,
    x: &DVector<f64>,
    s: usize,
) -> Result<(f64, f64)> {
    if s >= model.env.n() {
        return Err(Error::invalid(format!("state {s} out of range")));
    }
    let pi = model.pi();
    let avg = model.fields.average(pi)?;
    let p0 = f.pi_mean(pi, &avg.flow(x, t)?);
    let semi = model.env.semigroup_at(layer_time)?;
    let fx = DVector::from_vec(f.values(x));
    let s0 = (semi.row(s) * &fx)[0] - pi.mean(fx.as_slice());
    Ok((p0, s0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Order1Report {
    pub value: f64,
    /// b₁(t, x, s).
    pub b1: f64,
    /// ∫₀^∞ π(L_c S_r^{(0)} f)(x) dr.
    pub layer_integral: f64,
    /// ∫₀^t π(L_c b₁)(r, φ̄_{t−r}x) dr.
    pub drift_integral: f64,
    pub layer_cutoff: f64,
    pub converged: bool,
    pub refinement_change: f64,
}

struct Order1<'a> {
    setup: Setup<'a>,
    f: &'a ObservableF,
    /// Fixed-step density for tangent integrations (steps per unit time).
    steps_per_time: f64,
}

impl Order1<'_> {
    fn steps(&self, t: f64) -> usize {
        ((t * self.steps_per_time).ceil() as usize).max(64)
    }

    /// ∇(πf∘φ̄_t)(y)·v.
    fn du(&self, t: f64, y: &DVector<f64>, v: &DVector<f64>) -> f64 {
        let pi = self.setup.model.pi();
        if t == 0.0 {
            return self.f.pi_gradient(pi, y).dot(v);
        }
        let (phi, w) = self.setup.avg.tangent_flow(y, v, t, self.steps(t));
        self.f.pi_gradient(pi, &phi).dot(&w)
    }

    /// b₁(t, y, ·) = X(∂_t P0 − L_c P0)(y, ·) = −X(F_·(y)·∇u_t(y)).
    fn b1(&self, t: f64, y: &DVector<f64>) -> Vec<f64> {
        let fields = &self.setup.model.fields;
        let fbar = self.setup.avg.eval(y);
        let dbar = self.du(t, y, &fbar);
        let u: Vec<f64> = (0..self.setup.n())
            .map(|sp| dbar - self.du(t, y, &fields.eval(sp, y)))
            .collect();
        self.setup.apply_x(&u)
    }

    /// π(L_c b₁)(r, y) by central differences along each F_s(y).
    fn pi_lc_b1(&self, r: f64, y: &DVector<f64>, rel_step: f64) -> f64 {
        let pi = self.setup.model.pi();
        let fields = &self.setup.model.fields;
        let h = rel_step * (1.0 + y.norm());
        let mut acc = 0.0;
        for s in 0..self.setup.n() {
            let v = fields.eval(s, y);
            let vn = v.norm();
            if vn == 0.0 {
                continue;
            }
            let e = h / vn;
            let d = (self.b1(r, &(y + &v * e))[s] - self.b1(r, &(y - &v * e))[s]) / (2.0 * e);
            acc += pi.as_slice()[s] * d;
        }
        acc
    }

    /// ∫₀^∞ Σ_s π_s F_s(x)·(Σ_s' (e^{rQ})_{ss'} ∇f(x,s') − ∇πf(x)) dr,
    /// truncated where the spectral-gap bound drops below 1e-10.
    fn layer_integral(&self, x: &DVector<f64>) -> Result<(f64, f64)> {
        let model = self.setup.model;
        let pi = model.pi();
        let n = self.setup.n();
        let q = model.env.generator_matrix();
        let grads: Vec<DVector<f64>> = (0..n).map(|s| self.f.gradient(x, s)).collect();
        let gpi = self.f.pi_gradient(pi, x);
        // a_{ss'} = π_s F_s(x)·∇f(x,s'), integrand Σ_{ss'} a_{ss'} (e^{rQ} − Π)_{ss'}
        let a = DMatrix::from_fn(n, n, |s, sp| pi.as_slice()[s] * model.fields.eval(s, x).dot(&grads[sp]));
        let offset: f64 = (0..n)
            .map(|s| pi.as_slice()[s] * model.fields.eval(s, x).dot(&gpi))
            .sum();
        let integrand = |r: f64| {
            let e = linalg::expm(&(&q * r));
            a.component_mul(&e).sum() - offset
        };
        let gap = model.env.spectral_gap();
        if !gap.is_finite() {
            return Ok((0.0, 0.0));
        }
        let scale = integrand(0.0).abs().max(a.amax()).max(1e-300);
        let cutoff = ((1e10 * scale.max(1.0)).ln() / gap).max(1.0 / gap);
        // split at a few gap times so the quadrature sees the fast decay
        let mut total = 0.0;
        let mut lo = 0.0;
        for hi in [1.0 / gap, 4.0 / gap, cutoff] {
            if hi > lo {
                total += quadrature::integrate(integrand, lo, hi, 1e-13).integral;
                lo = hi;
            }
        }
        Ok((total, cutoff))
    }

    fn drift_integral(&self, t: f64, x: &DVector<f64>, rel_step: f64) -> Result<f64> {
        if t == 0.0 {
            return Ok(0.0);
        }
        // φ̄_{t−r}(x) along the same fixed grid for every r
        let avg = &self.setup.avg;
        let zero = DVector::zeros(x.len());
        let integrand = |r: f64| {
            let (y, _) = avg.tangent_flow(x, &zero, t - r, self.steps(t));
            self.pi_lc_b1(r, &y, rel_step)
        };
        let out = quadrature::integrate(integrand, 0.0, t, 1e-10);
        if !out.integral.is_finite() {
            return Err(Error::NonFinite("drift integral".into()));
        }
        Ok(out.integral)
    }
}

/// P_t^{(1)} f(x, s) = b₁ + ∫₀^∞ π(L_c S_r^{(0)} f)(x) dr + ∫₀^t π(L_c b₁)(r, φ̄_{t−r}x) dr.
pub fn semigroup_order1(
    model: &ModulatedModel,
    f: &ObservableF,
    t: f64,
    x: &DVector<f64>,
    s: usize,
) -> Result<Order1Report> {
    if !(t >= 0.0) || !t.is_finite() {
        return Err(Error::NonFinite(format!("time {t}")));
    }
    if s >= model.env.n() {
        return Err(Error::invalid(format!("state {s} out of range")));
    }
    let setup = Setup::new(model, f)?;
    // step density from the stiffest linearized rate along the averaged path
    let mut fastest: f64 = 1e-3;
    for k in 0..=8 {
        let y = setup.avg.flow(x, t * k as f64 / 8.0)?;
        for z in setup.avg.jacobian(&y).complex_eigenvalues().iter() {
            fastest = fastest.max(z.norm());
        }
    }
    let ord = Order1 {
        setup,
        f,
        steps_per_time: fastest / 0.01,
    };
    let b1 = ord.b1(t, x)[s];
    let (layer, cutoff) = ord.layer_integral(x)?;
    let drift = ord.drift_integral(t, x, FD_STEP)?;
    let drift_refined = ord.drift_integral(t, x, 0.5 * FD_STEP)?;
    let change = (drift - drift_refined).abs();
    let value = b1 + layer + drift_refined;
    Ok(Order1Report {
        value,
        b1,
        layer_integral: layer,
        drift_integral: drift_refined,
        layer_cutoff: cutoff,
        converged: change <= ORDER1_TOL && value.is_finite(),
        refinement_change: change,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlopePoint {
    pub epsilon: f64,
    pub mean: f64,
    pub std_error: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlopeCheck {
    pub mu0_f: f64,
    pub points: Vec<SlopePoint>,
    /// Fitted c₁ in μ_ε f − μ₀ f ≈ c₁ε + Kε².
    pub c1: f64,
    pub c1_se: f64,
    pub k: f64,
    pub k_se: f64,
    pub residuals: Vec<f64>,
}

impl SlopeCheck {
    /// Log-log slope of |μ_ε f − μ₀ f − c₁ε| against ε for a given c₁.
    pub fn residual_slope(&self, c1: f64) -> f64 {
        let e: Vec<f64> = self.points.iter().map(|p| p.epsilon).collect();
        let r: Vec<f64> = self
            .points
            .iter()
            .map(|p| p.mean - self.mu0_f - c1 * p.epsilon)
            .collect();
        stats::log_log_slope(&e, &r)
    }
}

/// Runs `ergodic_average` at each ε (grid spacing scaled with ε, independent
/// seeds) and fits μ_ε f − μ₀ f ≈ c₁ε + Kε² by weighted least squares.
pub fn mc_slope_check(
    model: &ModulatedModel,
    f: &ObservableF,
    mu0_f: f64,
    eps_list: &[f64],
    base: &SimConfig,
) -> Result<SlopeCheck> {
    if eps_list.len() < 3 {
        return Err(Error::invalid("need at least three values of epsilon"));
    }
    let mut points = Vec::with_capacity(eps_list.len());
    for (k, &eps) in eps_list.iter().enumerate() {
        let mut cfg = base.clone();
        cfg.epsilon = eps;
        cfg.sample_dt = base.sample_dt.map(|dt| dt * eps / base.epsilon);
        cfg.seed = rng::derive_seed(base.seed, k as u64);
        let est = pdmp_sim::ergodic_average(model, &cfg, f)?;
        points.push(SlopePoint {
            epsilon: eps,
            mean: est.mean,
            std_error: est.std_error,
            seed: cfg.seed,
        });
    }
    Ok(fit_slope(mu0_f, points))
}

pub fn fit_slope(mu0_f: f64, points: Vec<SlopePoint>) -> SlopeCheck {
    let x: Vec<f64> = points.iter().map(|p| p.epsilon).collect();
    let y: Vec<f64> = points.iter().map(|p| p.mean - mu0_f).collect();
    let sig: Vec<f64> = points.iter().map(|p| p.std_error.max(1e-15)).collect();
    let (c1, k, c1_se, k_se) = stats::fit_linear_quadratic(&x, &y, &sig);
    let residuals = x.iter().zip(&y).map(|(e, y)| y - c1 * e - k * e * e).collect();
    SlopeCheck {
        mu0_f,
        points,
        c1,
        c1_se,
        k,
        k_se,
        residuals,
    }
}

/// Exact E[f(X_t, σ_t) | X₀ = x, σ₀ = s] for scalar affine fields
/// F_s(x) = α_s + β_s x and f(x, s) = c_s + b_s x + m_s x², from the closed
/// moment equations of (1, X, X²)·1{σ = s}.
#[allow(clippy::too_many_arguments)]
pub fn affine_expectation(
    alpha: &[f64],
    beta: &[f64],
    env: &crate::env_chain::EnvKind,
    eps: f64,
    (c, b, m): (&[f64], &[f64], &[f64]),
    t: f64,
    x: f64,
    s: usize,
) -> Result<f64> {
    let n = env.n();
    if [alpha.len(), beta.len(), c.len(), b.len(), m.len()]
        .iter()
        .any(|&l| l != n)
        || s >= n
    {
        return Err(Error::invalid("affine expectation: one coefficient per state required"));
    }
    if !(eps > 0.0) || !(t >= 0.0) {
        return Err(Error::invalid("affine expectation: need eps > 0 and t >= 0"));
    }
    let qt = env.generator_matrix().transpose() / eps;
    let mut g = DMatrix::zeros(3 * n, 3 * n);
    for k in 0..3 {
        g.view_mut((k * n, k * n), (n, n)).copy_from(&qt);
        for i in 0..n {
            g[(k * n + i, k * n + i)] += k as f64 * beta[i];
            if k > 0 {
                g[(k * n + i, (k - 1) * n + i)] = k as f64 * alpha[i];
            }
        }
    }
    let mut v0 = DVector::zeros(3 * n);
    v0[s] = 1.0;
    v0[n + s] = x;
    v0[2 * n + s] = x * x;
    let v = linalg::expm(&(g * t)) * v0;
    Ok((0..n)
        .map(|i| c[i] * v[i] + b[i] * v[n + i] + m[i] * v[2 * n + i])
        .sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env_chain::{EnvGenerator, EnvKind};
    use crate::flows::{Region, VectorFieldSet};

    fn lin_model() -> ModulatedModel {
        // F_s(x) = a_s − x written as a general field
        let fields: Vec<flows::FieldFn> = [0.0, 2.0]
            .iter()
            .map(|&a| {
                let f: flows::FieldFn = std::sync::Arc::new(move |x: &DVector<f64>| DVector::from_element(1, a - x[0]));
                f
            })
            .collect();
        let vfs = VectorFieldSet::general(1, fields, Region::Interval { lo: -1.0, hi: 3.0 }).unwrap();
        ModulatedModel::new(vfs, EnvKind::RateMatrix(EnvGenerator::two_state(1.0, 2.0).unwrap())).unwrap()
    }

    #[test]
    fn order0_at_time_zero_reproduces_f() {
        let model = lin_model();
        let f = ObservableF::quadratic(
            vec![0.0, 0.0],
            vec![DVector::from_element(1, 1.0), DVector::from_element(1, -1.0)],
            Some(vec![DMatrix::from_element(1, 1, 1.0); 2]),
        )
        .unwrap();
        let x = DVector::from_element(1, 0.5);
        for s in 0..2 {
            let (p0, s0) = semigroup_order0(&model, &f, 0.0, 0.0, &x, s).unwrap();
            assert!((p0 + s0 - f.eval(&x, s)).abs() < 1e-14);
        }
        let (_, s0) = semigroup_order0(&model, &f, 0.0, 60.0, &x, 0).unwrap();
        assert!(s0.abs() < 1e-14);
    }

    #[test]
    fn layer_term_two_state_spectral_formula() {
        let model = lin_model();
        let f = ObservableF::state_only(vec![1.0, -2.0], 1);
        let x = DVector::from_element(1, 0.5);
        let pif = model.pi().mean(&[1.0, -2.0]);
        for tau in [0.1, 0.7, 2.0] {
            let (_, s0) = semigroup_order0(&model, &f, 0.3, tau, &x, 0).unwrap();
            let expect = (-3.0 * tau).exp() * (1.0 - pif);
            assert!((s0 - expect).abs() < 1e-13);
        }
    }

    #[test]
    fn b1_at_time_zero_hand_value() {
        // b₁(0, x, ·) = X(∂_t P0 − L_c P0) with ∇πf(x) = 2x + πb, F̄ − F_s = ā − a_s
        let model = lin_model();
        let f = ObservableF::quadratic(
            vec![0.0, 0.0],
            vec![DVector::from_element(1, 1.0), DVector::from_element(1, -1.0)],
            Some(vec![DMatrix::from_element(1, 1, 1.0); 2]),
        )
        .unwrap();
        let x = 0.5;
        let r = semigroup_order1(&model, &f, 0.0, &DVector::from_element(1, x), 0).unwrap();
        let pi = [2.0 / 3.0, 1.0 / 3.0];
        let abar = 2.0 / 3.0;
        let grad = 2.0 * x + (pi[0] - pi[1]);
        let u = [(abar - 0.0) * grad, (abar - 2.0) * grad];
        // X = Q/(p+q)² for the two-state chain p = 1, q = 2
        let b1 = (u[1] - u[0]) / 9.0;
        assert!((r.b1 - b1).abs() < 1e-12, "{} vs {}", r.b1, b1);
        assert!(b1 < 0.0);
    }
}
