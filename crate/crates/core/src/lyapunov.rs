//! Top Lyapunov exponent of switched cooperative linear systems
//! z' = A(σ(t/ε)) z, through the projective dynamics θ = z/(1·z).

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env_chain::{self, EnvGenerator, EnvKind, StationaryDist};
use crate::error::{Error, Result};
use crate::flows::{self, VectorFieldSet};
use crate::linalg;
use crate::observable::ObservableF;
use crate::pdmp_sim::{self, ModulatedModel, Segment, SimConfig, TrajectoryEstimate};
use crate::rng;
use crate::stats;

const PERRON_TOL: f64 = 1e-10;
const PERRON_MAX_ITER: usize = 1_000_000;

#[derive(Debug, Clone)]
pub struct SwitchedLinearSystem {
    matrices: Vec<DMatrix<f64>>,
    env: EnvKind,
    pi: StationaryDist,
}

impl SwitchedLinearSystem {
    pub fn new(matrices: Vec<DMatrix<f64>>, env: EnvKind) -> Result<Self> {
        if matrices.is_empty() || matrices.len() != env.n() {
            return Err(Error::invalid(format!(
                "{} matrices for {} environment states",
                matrices.len(),
                env.n()
            )));
        }
        let d = matrices[0].nrows();
        if d == 0 || matrices.iter().any(|m| m.nrows() != d || m.ncols() != d) {
            return Err(Error::invalid("matrices must be square with a common size"));
        }
        if let Some(s) = matrices.iter().position(|m| !linalg::is_finite_matrix(m)) {
            return Err(Error::NonFinite(format!("entry of A({s})")));
        }
        if let Some(s) = matrices.iter().position(|m| !flows::is_cooperative(m)) {
            return Err(Error::invalid(format!("A({s}) has a negative off-diagonal entry")));
        }
        let pi = env.stationary()?;
        let sys = SwitchedLinearSystem { matrices, env, pi };
        env_chain::check_irreducible(&sys.abar())?;
        Ok(sys)
    }

    /// Two-state system with rates p (0 → 1) and 1 − p (1 → 0), so π = (1 − p, p).
    pub fn two_state(a0: DMatrix<f64>, a1: DMatrix<f64>, p: f64) -> Result<Self> {
        if !(p > 0.0 && p < 1.0) {
            return Err(Error::invalid(format!("p must lie in (0, 1), got {p}")));
        }
        let env = EnvKind::RateMatrix(EnvGenerator::two_state(p, 1.0 - p)?);
        Self::new(vec![a0, a1], env)
    }

    pub fn matrices(&self) -> &[DMatrix<f64>] {
        &self.matrices
    }

    pub fn env(&self) -> &EnvKind {
        &self.env
    }

    pub fn pi(&self) -> &StationaryDist {
        &self.pi
    }

    pub fn dim(&self) -> usize {
        self.matrices[0].nrows()
    }

    /// Ā = Σ π_s A(s).
    pub fn abar(&self) -> DMatrix<f64> {
        weighted_sum(&self.matrices, self.pi.as_slice())
    }

    /// A(s) + δI for every s.
    pub fn shifted(&self, delta: f64) -> Result<Self> {
        let d = self.dim();
        let ms = self
            .matrices
            .iter()
            .map(|m| m + DMatrix::identity(d, d) * delta)
            .collect();
        Self::new(ms, self.env.clone())
    }

    /// The projective dynamics on the simplex.
    pub fn projective_model(&self) -> Result<ModulatedModel> {
        ModulatedModel::new(VectorFieldSet::projective(self.matrices.clone())?, self.env.clone())
    }

    /// f(θ, s) = 1·A(s)θ.
    pub fn growth_observable(&self) -> ObservableF {
        let ones = DVector::from_element(self.dim(), 1.0);
        let b = self.matrices.iter().map(|m| m.transpose() * &ones).collect();
        ObservableF::quadratic(vec![0.0; self.matrices.len()], b, None).expect("consistent by construction")
    }
}

fn weighted_sum(ms: &[DMatrix<f64>], w: &[f64]) -> DMatrix<f64> {
    let (r, c) = ms[0].shape();
    ms.iter().zip(w).fold(DMatrix::zeros(r, c), |acc, (m, p)| acc + m * *p)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerronPair {
    pub lambda_max: f64,
    /// Right eigenvector, Σ x̄ = 1.
    pub xbar: Vec<f64>,
    /// Left eigenvector, x̄·ȳ = 1.
    pub ybar: Vec<f64>,
    pub residual: f64,
}

impl PerronPair {
    pub fn x(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.xbar)
    }

    pub fn y(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.ybar)
    }
}

pub fn perron(sys: &SwitchedLinearSystem) -> Result<PerronPair> {
    perron_of(&sys.abar())
}

/// Principal eigenpair of an irreducible cooperative matrix by power
/// iteration on e^{hA}, h = 1/(1 + max|diag|).
pub fn perron_of(a: &DMatrix<f64>) -> Result<PerronPair> {
    let d = a.nrows();
    if a.ncols() != d || d == 0 {
        return Err(Error::invalid("matrix must be square"));
    }
    if !flows::is_cooperative(a) {
        return Err(Error::invalid("matrix is not cooperative"));
    }
    env_chain::check_irreducible(a)?;
    let h = 1.0 / (1.0 + a.diagonal().amax());
    let prop = linalg::expm(&(a * h));
    let scale = 1.0 + linalg::norm_1(a);
    let x = power(&prop, a, scale)?;
    let at = a.transpose();
    let y = power(&prop.transpose(), &at, scale)?;
    let lambda = (a * &x).sum();
    let y = &y / y.dot(&x);
    let residual = (a * &x - &x * lambda).amax().max((&at * &y - &y * lambda).amax());
    if residual > PERRON_TOL * scale {
        return Err(Error::NoConvergence(format!("Perron residual {residual:e}")));
    }
    Ok(PerronPair {
        lambda_max: lambda,
        xbar: x.iter().copied().collect(),
        ybar: y.iter().copied().collect(),
        residual,
    })
}

fn power(prop: &DMatrix<f64>, a: &DMatrix<f64>, scale: f64) -> Result<DVector<f64>> {
    let d = a.nrows();
    let mut x = DVector::from_element(d, 1.0 / d as f64);
    for it in 0..PERRON_MAX_ITER {
        x = prop * &x;
        x /= x.sum();
        if it % 8 == 7 {
            let lambda = (a * &x).sum();
            if (a * &x - &x * lambda).amax() < 1e-13 * scale {
                return Ok(x);
            }
        }
    }
    Err(Error::NoConvergence(format!(
        "power iteration did not settle in {PERRON_MAX_ITER} steps (near-degenerate spectral gap)"
    )))
}

/// Q⁻¹(A)(s) = Σ_s' X_{ss'} A(s'), entrywise application of the pseudo-inverse.
fn pseudo_inverse_matrices(sys: &SwitchedLinearSystem) -> Result<Vec<DMatrix<f64>>> {
    let x = sys.env.pseudo_inverse()?;
    let xm = x.matrix();
    let n = sys.matrices.len();
    Ok((0..n)
        .map(|s| {
            let w: Vec<f64> = (0..n).map(|sp| xm[(s, sp)]).collect();
            weighted_sum(&sys.matrices, &w)
        })
        .collect())
}

/// c₁ = Σ_s π_s ȳᵀ Q⁻¹(A)(s) (x̄ȳᵀ − I) A(s) x̄.
pub fn c1_closed_form(sys: &SwitchedLinearSystem, pp: &PerronPair) -> Result<f64> {
    let (x, y) = (pp.x(), pp.y());
    let d = sys.dim();
    let proj = &x * y.transpose() - DMatrix::identity(d, d);
    let qa = pseudo_inverse_matrices(sys)?;
    Ok(sys
        .pi
        .as_slice()
        .iter()
        .enumerate()
        .map(|(s, p)| p * (y.transpose() * &qa[s] * &proj * &sys.matrices[s] * &x)[0])
        .sum())
}

/// p(1 − p)[ȳᵀD²x̄ − (ȳᵀDx̄)²] with D = A₀ − A₁.
pub fn c1_two_state(a0: &DMatrix<f64>, a1: &DMatrix<f64>, p: f64, pp: &PerronPair) -> f64 {
    let (x, y) = (pp.x(), pp.y());
    let dm = a0 - a1;
    let dx = &dm * &x;
    let quad = y.dot(&(&dm * &dx));
    let lin = y.dot(&dx);
    p * (1.0 - p) * (quad - lin * lin)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResampleBound {
    /// Σ π_s [ȳᵀA(s)²x̄ − (ȳᵀA(s)x̄)²].
    pub c1: f64,
    /// ȳᵀ(mean of A² − Ā²)x̄.
    pub bound: f64,
}

pub fn resample_bound(matrices: &[DMatrix<f64>], pi: &StationaryDist, pp: &PerronPair) -> ResampleBound {
    let (x, y) = (pp.x(), pp.y());
    let w = pi.as_slice();
    let mut c1 = 0.0;
    for (m, p) in matrices.iter().zip(w) {
        let mx = m * &x;
        let lin = y.dot(&mx);
        c1 += p * (y.dot(&(m * mx)) - lin * lin);
    }
    let abar = weighted_sum(matrices, w);
    let sq: Vec<DMatrix<f64>> = matrices.iter().map(|m| m * m).collect();
    let bound = y.dot(&((weighted_sum(&sq, w) - &abar * &abar) * &x));
    ResampleBound { c1, bound }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub p: f64,
    pub lambda_max: f64,
    pub c1: f64,
}

pub fn default_p_grid() -> Vec<f64> {
    (1..=99).map(|k| k as f64 / 100.0).collect()
}

/// (p, λ_max(p), c₁(p)) over the two-state family with π = (1 − p, p).
pub fn sweep_p(a0: &DMatrix<f64>, a1: &DMatrix<f64>, p_grid: &[f64]) -> Result<Vec<SweepRow>> {
    p_grid
        .par_iter()
        .map(|&p| {
            let sys = SwitchedLinearSystem::two_state(a0.clone(), a1.clone(), p)?;
            let pp = perron(&sys)?;
            let c1 = c1_closed_form(&sys, &pp)?;
            Ok(SweepRow {
                p,
                lambda_max: pp.lambda_max,
                c1,
            })
        })
        .collect()
}

/// argmax of λ_max over a sweep.
pub fn sweep_peak(rows: &[SweepRow]) -> Option<SweepRow> {
    rows.iter().copied().fold(None, |best: Option<SweepRow>, r| match best {
        Some(b) if b.lambda_max >= r.lambda_max => Some(b),
        _ => Some(r),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LyapunovEstimate {
    /// (Σ ln(1·z) increments)/elapsed time.
    pub log_growth: TrajectoryEstimate,
    /// Time average of 1·A(s)θ, Gauss–Legendre within each segment.
    pub ergodic: TrajectoryEstimate,
    /// |difference| in units of the combined standard error.
    pub discrepancy_sigmas: f64,
}

impl LyapunovEstimate {
    pub fn consistent(&self) -> bool {
        self.discrepancy_sigmas <= 3.0
    }
}

pub fn lyapunov_mc(sys: &SwitchedLinearSystem, cfg: &SimConfig) -> Result<LyapunovEstimate> {
    let model = sys.projective_model()?;
    let f = sys.growth_observable();
    let integrand = |seg: &Segment, out: &mut [f64]| {
        out[0] = seg.log_mass;
        out[1] = pdmp_sim::segment_integral(&model, seg, &|x, s| f.eval(x, s));
    };
    let mut est = pdmp_sim::batch_integrals(&model, cfg, 2, &integrand)?;
    let ergodic = est.pop().expect("two functionals");
    let log_growth = est.pop().expect("two functionals");
    // floor for runs whose batches are identical up to rounding
    let se = log_growth
        .std_error
        .hypot(ergodic.std_error)
        .max(1e-10 * (1.0 + log_growth.mean.abs()));
    let discrepancy_sigmas = (log_growth.mean - ergodic.mean).abs() / se;
    Ok(LyapunovEstimate {
        log_growth,
        ergodic,
        discrepancy_sigmas,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertifyOptions {
    pub p_grid: Vec<f64>,
    pub eps_grid: Vec<f64>,
    /// δ = −max_p λ_max(p) − margin.
    pub margin: f64,
    /// p values screened with a short run at every ε.
    pub screen_p: Vec<f64>,
    pub screen_horizon: f64,
    /// Number of best screened (p, ε) pairs confirmed with a long run.
    pub confirm: usize,
    /// Configuration of the confirmation runs.
    pub mc: SimConfig,
}

impl CertifyOptions {
    /// p on 0.1:0.1:0.9, ε ∈ {0.2, 0.1, 0.05}, margin 0.02, screening horizon
    /// a tenth of `mc.horizon`.
    pub fn standard(mc: SimConfig) -> Self {
        CertifyOptions {
            p_grid: default_p_grid(),
            eps_grid: vec![0.2, 0.1, 0.05],
            margin: 0.02,
            screen_p: (1..=9).map(|k| k as f64 / 10.0).collect(),
            screen_horizon: mc.horizon / 10.0,
            confirm: 3,
            mc,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertifyTrial {
    pub p: f64,
    pub epsilon: f64,
    pub seed: u64,
    pub estimate: f64,
    pub std_error: f64,
    pub lower_99: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status")]
pub enum Certificate {
    Found {
        delta: f64,
        p: f64,
        epsilon: f64,
        /// max_p λ_max((1 − p)B₀ + pB₁), B_i = A_i + δI.
        shifted_lambda_max: f64,
        estimate: f64,
        std_error: f64,
        lower_99: f64,
        seed: u64,
        screening: Vec<CertifyTrial>,
        trials: Vec<CertifyTrial>,
    },
    NotFound {
        delta: f64,
        shifted_lambda_max: f64,
        reason: String,
        screening: Vec<CertifyTrial>,
        trials: Vec<CertifyTrial>,
    },
}

fn trial(sys: &SwitchedLinearSystem, p: f64, cfg: &SimConfig) -> Result<CertifyTrial> {
    let est = lyapunov_mc(sys, cfg)?.log_growth;
    Ok(CertifyTrial {
        p,
        epsilon: cfg.epsilon,
        seed: cfg.seed,
        estimate: est.mean,
        std_error: est.std_error,
        lower_99: est.mean - stats::Z_99 * est.std_error,
    })
}

/// Looks for (δ, p, ε) with every averaged shifted system stable
/// (max_p λ_max < 0) while the switched shifted system grows (the 99% lower
/// confidence bound of Λ_ε^δ(p) is positive). Candidates come from a short
/// screening run; each is confirmed by an independent long run.
pub fn destabilization_certificate(a0: &DMatrix<f64>, a1: &DMatrix<f64>, opts: &CertifyOptions) -> Result<Certificate> {
    if opts.p_grid.is_empty() || opts.eps_grid.is_empty() || opts.screen_p.is_empty() {
        return Err(Error::invalid("p, screening and epsilon grids must be non-empty"));
    }
    if !(opts.margin > 0.0) {
        return Err(Error::invalid("margin must be positive"));
    }
    let rows = sweep_p(a0, a1, &opts.p_grid)?;
    let peak = sweep_peak(&rows).expect("non-empty grid");
    let delta = -peak.lambda_max - opts.margin;
    let d = a0.nrows();
    let shift = DMatrix::identity(d, d) * delta;
    let (b0, b1) = (a0 + &shift, a1 + &shift);
    let shifted_rows = sweep_p(&b0, &b1, &opts.p_grid)?;
    let shifted_lambda_max = sweep_peak(&shifted_rows).expect("non-empty grid").lambda_max;

    let mut stage = 0u64;
    let mut config = |eps: f64, horizon: f64| {
        let mut cfg = opts.mc.clone();
        cfg.epsilon = eps;
        cfg.horizon = horizon;
        cfg.burn_in = opts.mc.burn_in.min(0.5 * horizon);
        cfg.sample_dt = None;
        cfg.seed = rng::derive_seed(opts.mc.seed, stage);
        stage += 1;
        cfg
    };

    let mut screening = Vec::new();
    for &p in &opts.screen_p {
        let sys = SwitchedLinearSystem::two_state(b0.clone(), b1.clone(), p)?;
        for &eps in &opts.eps_grid {
            screening.push(trial(&sys, p, &config(eps, opts.screen_horizon))?);
        }
    }
    let mut ranked = screening.clone();
    ranked.sort_by(|a, b| b.estimate.total_cmp(&a.estimate).then(a.p.total_cmp(&b.p)));
    ranked.truncate(opts.confirm.max(1));

    let mut trials = Vec::new();
    if shifted_lambda_max < 0.0 {
        for cand in &ranked {
            let sys = SwitchedLinearSystem::two_state(b0.clone(), b1.clone(), cand.p)?;
            let t = trial(&sys, cand.p, &config(cand.epsilon, opts.mc.horizon))?;
            trials.push(t.clone());
            if t.lower_99 > 0.0 {
                return Ok(Certificate::Found {
                    delta,
                    p: t.p,
                    epsilon: t.epsilon,
                    shifted_lambda_max,
                    estimate: t.estimate,
                    std_error: t.std_error,
                    lower_99: t.lower_99,
                    seed: t.seed,
                    screening,
                    trials,
                });
            }
        }
    }
    let reason = if shifted_lambda_max >= 0.0 {
        "shifted averaged systems are not all stable".to_string()
    } else {
        "no confirmation run had a positive 99% lower bound".to_string()
    };
    Ok(Certificate::NotFound {
        delta,
        shifted_lambda_max,
        reason,
        screening,
        trials,
    })
}
