//! Vector fields, their flows, the averaged field and its equilibrium.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::env_chain::StationaryDist;
use crate::error::{Error, Result};
use crate::linalg;
use crate::ode::{self, Dopri5, OdeOptions};

pub type FieldFn = Arc<dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync>;
pub type JacobianFn = Arc<dyn Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync>;

/// Slack allowed outside the declared region.
pub const REGION_TOL: f64 = 1e-9;
const RK_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub enum Region {
    Box { lo: Vec<f64>, hi: Vec<f64> },
    Simplex { dim: usize },
    Interval { lo: f64, hi: f64 },
}

impl Region {
    pub fn dim(&self) -> usize {
        match self {
            Region::Box { lo, .. } => lo.len(),
            Region::Simplex { dim } => *dim,
            Region::Interval { .. } => 1,
        }
    }

    /// How far `x` lies outside the region (0 inside).
    pub fn distance(&self, x: &DVector<f64>) -> f64 {
        match self {
            Region::Box { lo, hi } => x
                .iter()
                .zip(lo.iter().zip(hi))
                .map(|(v, (l, h))| (l - v).max(v - h).max(0.0))
                .fold(0.0, f64::max),
            Region::Interval { lo, hi } => (lo - x[0]).max(x[0] - hi).max(0.0),
            Region::Simplex { .. } => {
                let neg = x.iter().map(|v| -v).fold(0.0, f64::max);
                neg.max((x.sum() - 1.0).abs())
            }
        }
    }

    pub fn contains(&self, x: &DVector<f64>) -> bool {
        x.len() == self.dim() && self.distance(x) <= REGION_TOL
    }

    pub fn project(&self, x: &mut DVector<f64>) {
        match self {
            Region::Box { lo, hi } => {
                for i in 0..x.len() {
                    x[i] = x[i].clamp(lo[i], hi[i]);
                }
            }
            Region::Interval { lo, hi } => x[0] = x[0].clamp(*lo, *hi),
            Region::Simplex { .. } => {
                x.iter_mut().for_each(|v| *v = v.max(0.0));
                let s = x.sum();
                *x /= s;
            }
        }
    }

    pub fn diam(&self) -> f64 {
        match self {
            Region::Box { lo, hi } => lo.iter().zip(hi).map(|(l, h)| (h - l).powi(2)).sum::<f64>().sqrt(),
            Region::Simplex { .. } => std::f64::consts::SQRT_2,
            Region::Interval { lo, hi } => hi - lo,
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            Region::Box { lo, hi } => {
                if lo.len() != hi.len() || lo.is_empty() {
                    return Err(Error::invalid("box bounds must be non-empty and of equal length"));
                }
                if lo
                    .iter()
                    .zip(hi)
                    .any(|(l, h)| !(l <= h) || !l.is_finite() || !h.is_finite())
                {
                    return Err(Error::invalid("box bounds must be finite with lo <= hi"));
                }
            }
            Region::Interval { lo, hi } => {
                if !(lo <= hi) || !lo.is_finite() || !hi.is_finite() {
                    return Err(Error::invalid("interval bounds must be finite with lo <= hi"));
                }
            }
            Region::Simplex { dim } => {
                if *dim == 0 {
                    return Err(Error::invalid("simplex dimension must be positive"));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone)]
pub enum FieldKind {
    GeneralRk {
        fields: Vec<FieldFn>,
        jacobians: Option<Vec<JacobianFn>>,
    },
    LinearExact(Vec<DMatrix<f64>>),
    LogisticExact {
        a10: Vec<f64>,
        a11: Vec<f64>,
    },
    ProjectiveLinear(Vec<DMatrix<f64>>),
}

impl fmt::Debug for FieldKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FieldKind::GeneralRk { fields, jacobians } => f
                .debug_struct("GeneralRk")
                .field("states", &fields.len())
                .field("analytic_jacobian", &jacobians.is_some())
                .finish(),
            FieldKind::LinearExact(m) => f.debug_tuple("LinearExact").field(m).finish(),
            FieldKind::LogisticExact { a10, a11 } => f
                .debug_struct("LogisticExact")
                .field("a10", a10)
                .field("a11", a11)
                .finish(),
            FieldKind::ProjectiveLinear(m) => f.debug_tuple("ProjectiveLinear").field(m).finish(),
        }
    }
}

/// One vector field per environment state, on a declared invariant region.
#[derive(Debug, Clone)]
pub struct VectorFieldSet {
    dim: usize,
    kind: FieldKind,
    region: Region,
}

fn check_square(ms: &[DMatrix<f64>]) -> Result<usize> {
    let d = ms
        .first()
        .ok_or_else(|| Error::invalid("at least one matrix is required"))?
        .nrows();
    for m in ms {
        if m.nrows() != d || m.ncols() != d {
            return Err(Error::invalid("matrices must all be square of the same size"));
        }
        if !linalg::is_finite_matrix(m) {
            return Err(Error::NonFinite("matrix entry".into()));
        }
    }
    Ok(d)
}

pub fn is_cooperative(a: &DMatrix<f64>) -> bool {
    (0..a.nrows()).all(|i| (0..a.ncols()).all(|j| i == j || a[(i, j)] >= 0.0))
}

impl VectorFieldSet {
    pub fn general(dim: usize, fields: Vec<FieldFn>, region: Region) -> Result<Self> {
        if fields.is_empty() {
            return Err(Error::invalid("at least one vector field is required"));
        }
        Self::checked(
            dim,
            FieldKind::GeneralRk {
                fields,
                jacobians: None,
            },
            region,
        )
    }

    pub fn general_with_jacobians(
        dim: usize,
        fields: Vec<FieldFn>,
        jacobians: Vec<JacobianFn>,
        region: Region,
    ) -> Result<Self> {
        if fields.is_empty() || fields.len() != jacobians.len() {
            return Err(Error::invalid("need one Jacobian per vector field"));
        }
        Self::checked(
            dim,
            FieldKind::GeneralRk {
                fields,
                jacobians: Some(jacobians),
            },
            region,
        )
    }

    pub fn linear(matrices: Vec<DMatrix<f64>>, region: Region) -> Result<Self> {
        let d = check_square(&matrices)?;
        Self::checked(d, FieldKind::LinearExact(matrices), region)
    }

    /// Logistic fields x(a10 − a11 x) on the interval [min a10/a11, max a10/a11].
    pub fn logistic(a10: Vec<f64>, a11: Vec<f64>) -> Result<Self> {
        let (p0, p1) = logistic_bounds(&a10, &a11)?;
        Self::logistic_on(a10, a11, Region::Interval { lo: p0, hi: p1 })
    }

    pub fn logistic_on(a10: Vec<f64>, a11: Vec<f64>, region: Region) -> Result<Self> {
        logistic_bounds(&a10, &a11)?;
        Self::checked(1, FieldKind::LogisticExact { a10, a11 }, region)
    }

    pub fn projective(matrices: Vec<DMatrix<f64>>) -> Result<Self> {
        let d = check_square(&matrices)?;
        if let Some(s) = matrices.iter().position(|m| !is_cooperative(m)) {
            return Err(Error::invalid(format!(
                "matrix of state {s} is not cooperative (negative off-diagonal entry)"
            )));
        }
        Self::checked(d, FieldKind::ProjectiveLinear(matrices), Region::Simplex { dim: d })
    }

    fn checked(dim: usize, kind: FieldKind, region: Region) -> Result<Self> {
        region.validate()?;
        if region.dim() != dim {
            return Err(Error::invalid(format!(
                "region dimension {} does not match state dimension {dim}",
                region.dim()
            )));
        }
        Ok(VectorFieldSet { dim, kind, region })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn kind(&self) -> &FieldKind {
        &self.kind
    }

    pub fn region(&self) -> &Region {
        &self.region
    }

    pub fn n_states(&self) -> usize {
        match &self.kind {
            FieldKind::GeneralRk { fields, .. } => fields.len(),
            FieldKind::LinearExact(m) | FieldKind::ProjectiveLinear(m) => m.len(),
            FieldKind::LogisticExact { a10, .. } => a10.len(),
        }
    }

    /// F_s(x).
    pub fn eval(&self, s: usize, x: &DVector<f64>) -> DVector<f64> {
        match &self.kind {
            FieldKind::GeneralRk { fields, .. } => fields[s](x),
            FieldKind::LinearExact(m) => &m[s] * x,
            FieldKind::LogisticExact { a10, a11 } => DVector::from_element(1, x[0] * (a10[s] - a11[s] * x[0])),
            FieldKind::ProjectiveLinear(m) => {
                let ax = &m[s] * x;
                let mass = ax.sum();
                ax - x * mass
            }
        }
    }

    /// DF_s(x), analytic for the exact kinds.
    pub fn jacobian(&self, s: usize, x: &DVector<f64>) -> DMatrix<f64> {
        match &self.kind {
            FieldKind::GeneralRk { jacobians: Some(j), .. } => j[s](x),
            FieldKind::GeneralRk { .. } => fd_jacobian(|y| self.eval(s, y), x),
            FieldKind::LinearExact(m) => m[s].clone(),
            FieldKind::LogisticExact { a10, a11 } => DMatrix::from_element(1, 1, a10[s] - 2.0 * a11[s] * x[0]),
            FieldKind::ProjectiveLinear(m) => {
                let a = &m[s];
                let d = self.dim;
                let col_sums = DMatrix::from_fn(1, d, |_, j| a.column(j).sum());
                let mass = (a * x).sum();
                a - x * col_sums - DMatrix::identity(d, d) * mass
            }
        }
    }

    pub fn flow(&self, s: usize, x0: &DVector<f64>, t: f64) -> Result<DVector<f64>> {
        self.flow_with_mass(s, x0, t).map(|(x, _)| x)
    }

    /// Flow for duration `t` together with the log-mass increment ln(1·e^{tA}θ)
    /// (projective kind; zero for the others).
    pub fn flow_with_mass(&self, s: usize, x0: &DVector<f64>, t: f64) -> Result<(DVector<f64>, f64)> {
        if !(t >= 0.0) || !t.is_finite() {
            return Err(Error::NonFinite(format!("flow duration {t}")));
        }
        if x0.len() != self.dim {
            return Err(Error::invalid("initial point has the wrong dimension"));
        }
        if t == 0.0 {
            return Ok((x0.clone(), 0.0));
        }
        let (x, mass) = match &self.kind {
            FieldKind::LinearExact(m) => (linalg::expm(&(&m[s] * t)) * x0, 0.0),
            FieldKind::LogisticExact { a10, a11 } => {
                (DVector::from_element(1, logistic_flow(a10[s], a11[s], x0[0], t)), 0.0)
            }
            FieldKind::ProjectiveLinear(m) => {
                let z = linalg::expm(&(&m[s] * t)) * x0;
                let mass = z.sum();
                if !(mass > 0.0) || z.iter().any(|v| *v < -1e-12) {
                    return Err(Error::Degenerate("iterate left the positive cone".into()));
                }
                (z / mass, mass.ln())
            }
            FieldKind::GeneralRk { .. } => {
                let rhs = |_t: f64, y: &DVector<f64>| self.eval(s, y);
                (self.integrate_checked(&rhs, x0.clone(), t)?, 0.0)
            }
        };
        let dist = self.region.distance(&x);
        if dist > REGION_TOL || !x.iter().all(|v| v.is_finite()) {
            return Err(Error::LeftRegion { t, distance: dist });
        }
        Ok((x, mass))
    }

    fn integrate_checked(
        &self,
        rhs: &dyn Fn(f64, &DVector<f64>) -> DVector<f64>,
        x0: DVector<f64>,
        t: f64,
    ) -> Result<DVector<f64>> {
        let mut solver = Dopri5::new(rhs, 0.0, x0, OdeOptions::with_tol(RK_TOL));
        while solver.t < t {
            solver.step(t)?;
            let dist = self.region.distance(&solver.y);
            if dist > REGION_TOL {
                return Err(Error::LeftRegion {
                    t: solver.t,
                    distance: dist,
                });
            }
        }
        Ok(solver.y)
    }

    /// The π-averaged field F̄ = Σ π_s F_s, of the same kind.
    pub fn average(&self, pi: &StationaryDist) -> Result<AveragedField> {
        if pi.n() != self.n_states() {
            return Err(Error::invalid(format!(
                "{} environment states but {} vector fields",
                pi.n(),
                self.n_states()
            )));
        }
        let w = pi.as_slice().to_vec();
        let avg_mat = |ms: &[DMatrix<f64>]| {
            ms.iter()
                .zip(&w)
                .fold(DMatrix::zeros(self.dim, self.dim), |acc, (m, p)| acc + m * *p)
        };
        let kind = match &self.kind {
            FieldKind::LinearExact(m) => FieldKind::LinearExact(vec![avg_mat(m)]),
            FieldKind::ProjectiveLinear(m) => FieldKind::ProjectiveLinear(vec![avg_mat(m)]),
            FieldKind::LogisticExact { a10, a11 } => FieldKind::LogisticExact {
                a10: vec![pi.mean(a10)],
                a11: vec![pi.mean(a11)],
            },
            FieldKind::GeneralRk { fields, jacobians } => {
                let fs = fields.clone();
                let ws = w.clone();
                let field: FieldFn = Arc::new(move |x: &DVector<f64>| {
                    fs.iter()
                        .zip(&ws)
                        .fold(DVector::zeros(x.len()), |acc, (f, p)| acc + f(x) * *p)
                });
                let jac = jacobians.as_ref().map(|js| {
                    let js = js.clone();
                    let ws = w.clone();
                    let j: JacobianFn = Arc::new(move |x: &DVector<f64>| {
                        js.iter()
                            .zip(&ws)
                            .fold(DMatrix::zeros(x.len(), x.len()), |acc, (j, p)| acc + j(x) * *p)
                    });
                    vec![j]
                });
                FieldKind::GeneralRk {
                    fields: vec![field],
                    jacobians: jac,
                }
            }
        };
        Ok(AveragedField {
            field: VectorFieldSet {
                dim: self.dim,
                kind,
                region: self.region.clone(),
            },
            pi: pi.clone(),
        })
    }
}

/// p₀ = min a10/a11, p₁ = max a10/a11 after validating the logistic hypotheses.
pub fn logistic_bounds(a10: &[f64], a11: &[f64]) -> Result<(f64, f64)> {
    if a10.is_empty() || a10.len() != a11.len() {
        return Err(Error::invalid("a10 and a11 must be non-empty and of equal length"));
    }
    if a10.iter().chain(a11).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("logistic coefficient".into()));
    }
    if a11.iter().any(|&v| v <= 0.0) {
        return Err(Error::invalid("a11 must be positive in every state"));
    }
    let ratios: Vec<f64> = a10.iter().zip(a11).map(|(a, b)| a / b).collect();
    let p0 = ratios.iter().copied().fold(f64::INFINITY, f64::min);
    let p1 = ratios.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if p0 <= 0.0 {
        return Err(Error::invalid("inf a10/a11 must be positive"));
    }
    Ok((p0, p1))
}

/// Solution of x' = x(a − b x) at time t.
pub fn logistic_flow(a: f64, b: f64, x0: f64, t: f64) -> f64 {
    if a == 0.0 {
        return x0 / (1.0 + b * x0 * t);
    }
    let decay = (-a * t).exp();
    // (1 − e^{−at})/a without cancellation
    let growth = -(-a * t).exp_m1() / a;
    x0 / (decay + b * x0 * growth)
}

fn fd_jacobian(f: impl Fn(&DVector<f64>) -> DVector<f64>, x: &DVector<f64>) -> DMatrix<f64> {
    let d = x.len();
    let h = 1e-6 * (1.0 + x.norm());
    let mut jac = DMatrix::zeros(d, d);
    for j in 0..d {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[j] += h;
        xm[j] -= h;
        let col = (f(&xp) - f(&xm)) / (2.0 * h);
        jac.set_column(j, &col);
    }
    jac
}

/// F̄ as a single-state field set, with the weights that produced it.
#[derive(Debug, Clone)]
pub struct AveragedField {
    field: VectorFieldSet,
    pi: StationaryDist,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Equilibrium {
    pub xbar: DVector<f64>,
    pub residual: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowIntegral {
    pub value: f64,
    /// Magnitude of the fitted exponential tail added after the cut.
    pub truncation_error: f64,
    pub horizon: f64,
}

/// Fixed-step schedule for tangent (variational) integrations near x̄.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TangentGrid {
    pub horizon: f64,
    pub steps: usize,
    /// Slowest decay rate of the linearization at x̄.
    pub decay: f64,
}

impl AveragedField {
    pub fn field(&self) -> &VectorFieldSet {
        &self.field
    }

    pub fn pi(&self) -> &StationaryDist {
        &self.pi
    }

    pub fn eval(&self, x: &DVector<f64>) -> DVector<f64> {
        self.field.eval(0, x)
    }

    pub fn jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        self.field.jacobian(0, x)
    }

    pub fn flow(&self, x0: &DVector<f64>, t: f64) -> Result<DVector<f64>> {
        self.field.flow(0, x0, t)
    }

    fn is_projective(&self) -> bool {
        matches!(self.field.kind, FieldKind::ProjectiveLinear(_))
    }

    /// Eigenvalues of the linearization at x̄ restricted to the directions
    /// the dynamics lives in (the simplex tangent space for the projective kind).
    fn linearized_spectrum(&self, xbar: &DVector<f64>) -> Vec<(f64, f64)> {
        match &self.field.kind {
            FieldKind::ProjectiveLinear(m) => {
                let eig = m[0].clone().complex_eigenvalues();
                let mut ev: Vec<(f64, f64)> = eig.iter().map(|z| (z.re, z.im)).collect();
                ev.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
                let top = ev[0].0;
                ev.iter().skip(1).map(|(re, im)| (re - top, *im)).collect()
            }
            _ => self
                .jacobian(xbar)
                .complex_eigenvalues()
                .iter()
                .map(|z| (z.re, z.im))
                .collect(),
        }
    }

    /// Schedule for the fixed-step variational integrations used by the
    /// expansion: horizon of 36 slowest decay times, step 0.02 over the
    /// largest linearized rate.
    pub fn tangent_grid(&self, eq: &Equilibrium) -> Result<TangentGrid> {
        let spec = self.linearized_spectrum(&eq.xbar);
        if spec.is_empty() {
            return Ok(TangentGrid {
                horizon: 0.0,
                steps: 1,
                decay: f64::INFINITY,
            });
        }
        let decay = spec.iter().map(|(re, _)| -re).fold(f64::INFINITY, f64::min);
        if !(decay > 0.0) {
            return Err(Error::NoConvergence(format!(
                "linearization at the equilibrium is not contracting (slowest rate {decay:e})"
            )));
        }
        let fastest = spec
            .iter()
            .map(|(re, im)| (re * re + im * im).sqrt())
            .fold(0.0, f64::max);
        let horizon = 36.0 / decay;
        let dt = 0.02 / fastest;
        let steps = ((horizon / dt).ceil() as usize).clamp(200, 2_000_000);
        Ok(TangentGrid { horizon, steps, decay })
    }

    fn normalize_pair(&self, y: &mut DVector<f64>, d: usize) {
        if self.is_projective() {
            let s: f64 = y.rows(0, d).sum();
            for i in 0..d {
                y[i] /= s;
            }
            let ws: f64 = y.rows(d, d).sum();
            for i in 0..d {
                y[d + i] -= y[i] * ws;
            }
        }
    }

    /// (φ̄_t(x), Dφ̄_t(x)·v) by fixed-step integration of the variational system.
    pub fn tangent_flow(
        &self,
        x: &DVector<f64>,
        v: &DVector<f64>,
        t: f64,
        steps: usize,
    ) -> (DVector<f64>, DVector<f64>) {
        let d = self.field.dim;
        let rhs = |_t: f64, y: &DVector<f64>| {
            let xs = y.rows(0, d).into_owned();
            let ws = y.rows(d, d).into_owned();
            let mut out = DVector::zeros(2 * d);
            out.rows_mut(0, d).copy_from(&self.eval(&xs));
            out.rows_mut(d, d).copy_from(&(self.jacobian(&xs) * ws));
            out
        };
        let mut y0 = DVector::zeros(2 * d);
        y0.rows_mut(0, d).copy_from(x);
        y0.rows_mut(d, d).copy_from(v);
        let proj = |y: &mut DVector<f64>| self.normalize_pair(y, d);
        let y = ode::integrate_fixed(&rhs, 0.0, y0, t, steps, Some(&proj));
        (y.rows(0, d).into_owned(), y.rows(d, d).into_owned())
    }

    /// Directional derivative D_v h(x) of h(x) = ∫₀^∞ (g(x̄) − g(φ̄_r x)) dr,
    /// i.e. −∫₀^∞ ∇g(φ̄_r x)·Dφ̄_r(x)v dr, on the fixed grid (smooth in x).
    pub fn flow_integral_derivative(
        &self,
        grad_g: &dyn Fn(&DVector<f64>) -> DVector<f64>,
        x: &DVector<f64>,
        v: &DVector<f64>,
        grid: &TangentGrid,
    ) -> (f64, f64) {
        let d = self.field.dim;
        let rhs = |_t: f64, y: &DVector<f64>| {
            let xs = y.rows(0, d).into_owned();
            let ws = y.rows(d, d).into_owned();
            let mut out = DVector::zeros(2 * d + 1);
            out.rows_mut(0, d).copy_from(&self.eval(&xs));
            out.rows_mut(d, d).copy_from(&(self.jacobian(&xs) * &ws));
            out[2 * d] = -grad_g(&xs).dot(&ws);
            out
        };
        let mut y0 = DVector::zeros(2 * d + 1);
        y0.rows_mut(0, d).copy_from(x);
        y0.rows_mut(d, d).copy_from(v);
        let proj = |y: &mut DVector<f64>| self.normalize_pair(y, d);
        let y = ode::integrate_fixed(&rhs, 0.0, y0, grid.horizon, grid.steps, Some(&proj));
        let xs = y.rows(0, d).into_owned();
        let ws = y.rows(d, d).into_owned();
        // remaining integrand decays at least at the linearized rate
        let tail = -grad_g(&xs).dot(&ws) / grid.decay;
        (y[2 * d] + tail, tail.abs())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EquilibriumOptions {
    pub max_horizon: f64,
    pub chunk: f64,
}

impl Default for EquilibriumOptions {
    fn default() -> Self {
        EquilibriumOptions {
            max_horizon: 1e4,
            chunk: 1.0,
        }
    }
}

pub fn flow(vfs: &VectorFieldSet, s: usize, x0: &DVector<f64>, t: f64) -> Result<DVector<f64>> {
    if s >= vfs.n_states() {
        return Err(Error::invalid(format!("state {s} out of range")));
    }
    vfs.flow(s, x0, t)
}

pub fn averaged_flow(avg: &AveragedField, x0: &DVector<f64>, t: f64) -> Result<DVector<f64>> {
    avg.flow(x0, t)
}

pub fn find_equilibrium(avg: &AveragedField, x_init: &DVector<f64>) -> Result<Equilibrium> {
    find_equilibrium_with(avg, x_init, EquilibriumOptions::default())
}

pub fn find_equilibrium_with(
    avg: &AveragedField,
    x_init: &DVector<f64>,
    opts: EquilibriumOptions,
) -> Result<Equilibrium> {
    let region = avg.field.region();
    if !region.contains(x_init) {
        return Err(Error::invalid("initial point lies outside the declared region"));
    }
    let mut x = x_init.clone();
    let mut t = 0.0;
    loop {
        if avg.eval(&x).norm() < 1e-10 {
            break;
        }
        let next = avg.flow(&x, opts.chunk)?;
        let moved = (&next - &x).norm();
        x = next;
        t += opts.chunk;
        if moved < 1e-12 {
            break;
        }
        if t >= opts.max_horizon {
            return Err(Error::NoConvergence(format!(
                "averaged flow still moving after t = {t} (|F̄(x)| = {:e})",
                avg.eval(&x).norm()
            )));
        }
    }
    let xbar = newton_polish(avg, x)?;
    let residual = avg.eval(&xbar).norm();
    if residual >= 1e-10 {
        return Err(Error::NoConvergence(format!(
            "Newton polish stalled with |F̄(x̄)| = {residual:e}"
        )));
    }
    Ok(Equilibrium { xbar, residual })
}

fn newton_polish(avg: &AveragedField, mut x: DVector<f64>) -> Result<DVector<f64>> {
    let region = avg.field.region();
    let mut res = avg.eval(&x).norm();
    for _ in 0..50 {
        if res < 1e-14 {
            break;
        }
        let fx = avg.eval(&x);
        let jac = avg.jacobian(&x);
        let svd = jac.svd(true, true);
        let step = match svd.solve(&fx, 1e-12 * svd.singular_values.max().max(1e-300)) {
            Ok(s) => s,
            Err(_) => break,
        };
        let mut lambda = 1.0;
        let mut improved = false;
        while lambda > 1e-4 {
            let mut trial = &x - &step * lambda;
            if matches!(region, Region::Simplex { .. }) {
                region.project(&mut trial);
            }
            let r = avg.eval(&trial).norm();
            if r < res {
                x = trial;
                res = r;
                improved = true;
                break;
            }
            lambda *= 0.5;
        }
        if !improved {
            break;
        }
    }
    Ok(x)
}

/// ∫₀^∞ (g(x̄) − g(φ̄_r x0)) dr.
///
/// The averaged flow is integrated together with the running integral until
/// |x − x̄| < 1e-8·diam(region); the remainder is completed with an exponential
/// tail whose rate is fitted on the last decade of |x − x̄|.
pub fn flow_integral(
    avg: &AveragedField,
    g: &dyn Fn(&DVector<f64>) -> f64,
    x0: &DVector<f64>,
    eq: &Equilibrium,
) -> Result<FlowIntegral> {
    let d = avg.field.dim;
    let xbar = &eq.xbar;
    let gbar = g(xbar);
    let cut = 1e-8 * avg.field.region().diam().max(1e-300);
    let grid = avg.tangent_grid(eq)?;
    let horizon = 50.0 / grid.decay;

    let dist0 = (x0 - xbar).norm();
    if dist0 < cut {
        let tail = (gbar - g(x0)) / grid.decay;
        return Ok(FlowIntegral {
            value: tail,
            truncation_error: tail.abs(),
            horizon: 0.0,
        });
    }

    let rhs = |_t: f64, y: &DVector<f64>| {
        let xs = y.rows(0, d).into_owned();
        let mut out = DVector::zeros(d + 1);
        out.rows_mut(0, d).copy_from(&avg.eval(&xs));
        out[d] = gbar - g(&xs);
        out
    };
    let mut y0 = DVector::zeros(d + 1);
    y0.rows_mut(0, d).copy_from(x0);
    let opts = OdeOptions {
        rtol: 1e-12,
        atol: 1e-14,
        ..Default::default()
    };
    let mut solver = Dopri5::new(&rhs, 0.0, y0, opts);
    let mut decade_start: Option<(f64, f64)> = None;
    loop {
        solver.step(horizon)?;
        if avg.is_projective() {
            let mut y = solver.y.clone();
            let s: f64 = y.rows(0, d).sum();
            for i in 0..d {
                y[i] /= s;
            }
            solver.set_state(y);
        }
        let xs = solver.y.rows(0, d).into_owned();
        let dist = (&xs - xbar).norm();
        if decade_start.is_none() && dist < 10.0 * cut {
            decade_start = Some((solver.t, dist));
        }
        if dist < cut {
            let rate = match decade_start {
                Some((t0, d0)) if solver.t > t0 && d0 > dist => (d0 / dist).ln() / (solver.t - t0),
                _ => grid.decay,
            };
            let tail = (gbar - g(&xs)) / rate;
            return Ok(FlowIntegral {
                value: solver.y[d] + tail,
                truncation_error: tail.abs(),
                horizon: solver.t,
            });
        }
        if solver.t >= horizon {
            return Err(Error::NoConvergence(format!(
                "averaged flow did not reach x̄ within t = {horizon} (distance {dist:e})"
            )));
        }
    }
}
