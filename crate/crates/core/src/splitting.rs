//! Randomized operator splitting: the fields F₁..F_N are applied in cyclic
//! order for i.i.d. durations ε·τ_k/N, τ_k ~ Exp(1), so one cycle takes ε on
//! average and the scheme tracks the flow of F̄ = (1/N) Σ F_k.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::Exp1;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env_chain::StationaryDist;
use crate::error::{Error, Result};
use crate::flows::{FieldKind, VectorFieldSet};
use crate::linalg;
use crate::rng::{self, Stream};
use crate::stats;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Durations {
    /// τ_k ~ Exp(1).
    Exponential,
    /// τ_k ≡ 1 (Lie splitting with step ε/N per field).
    Deterministic,
}

#[derive(Debug, Clone)]
pub struct SplitScheme {
    fields: VectorFieldSet,
    pub epsilon: f64,
    pub durations: Durations,
}

impl SplitScheme {
    pub fn new(fields: VectorFieldSet, epsilon: f64) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(Error::invalid(format!("epsilon must be positive, got {epsilon}")));
        }
        Ok(SplitScheme {
            fields,
            epsilon,
            durations: Durations::Exponential,
        })
    }

    pub fn deterministic(mut self) -> Self {
        self.durations = Durations::Deterministic;
        self
    }

    pub fn with_epsilon(&self, epsilon: f64) -> Result<Self> {
        let mut s = SplitScheme::new(self.fields.clone(), epsilon)?;
        s.durations = self.durations;
        Ok(s)
    }

    pub fn fields(&self) -> &VectorFieldSet {
        &self.fields
    }

    pub fn n_fields(&self) -> usize {
        self.fields.n_states()
    }

    /// Uniform weights over the subflows.
    pub fn uniform(&self) -> StationaryDist {
        let n = self.n_fields();
        StationaryDist::new(vec![1.0 / n as f64; n]).expect("uniform weights are valid")
    }

    /// φ̄_t(x) for F̄ = (1/N) Σ F_k.
    pub fn reference_flow(&self, x: &DVector<f64>, t: f64) -> Result<DVector<f64>> {
        self.fields.average(&self.uniform())?.flow(x, t)
    }
}

/// One cycle of the scheme; returns the new point and the elapsed time ε·Στ_k/N.
pub fn split_step<R: Rng + ?Sized>(scheme: &SplitScheme, x: &DVector<f64>, rng: &mut R) -> Result<(DVector<f64>, f64)> {
    let n = scheme.n_fields();
    let unit = scheme.epsilon / n as f64;
    let mut y = x.clone();
    let mut elapsed = 0.0;
    for k in 0..n {
        let tau: f64 = match scheme.durations {
            Durations::Exponential => rng.sample(Exp1),
            Durations::Deterministic => 1.0,
        };
        let h = unit * tau;
        y = scheme.fields.flow(k, &y, h)?;
        elapsed += h;
    }
    Ok((y, elapsed))
}

fn steps_for(t: f64, eps: f64) -> Result<usize> {
    let n = (t / eps).round();
    if n < 1.0 || (n * eps - t).abs() > 1e-9 * t.max(1.0) {
        return Err(Error::invalid(format!("t = {t} is not a multiple of epsilon = {eps}")));
    }
    Ok(n as usize)
}

/// Mean and standard error of f(x_n) over `n_mc` replicates; replicate i
/// uses stream i of `seed`.
pub fn mc_expectation(
    scheme: &SplitScheme,
    f: &(dyn Fn(&DVector<f64>) -> f64 + Sync),
    x0: &DVector<f64>,
    steps: usize,
    n_mc: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    if n_mc < 2 {
        return Err(Error::invalid("need at least two replicates"));
    }
    let values: Vec<Result<f64>> = (0..n_mc)
        .into_par_iter()
        .map(|i| {
            let mut r: Stream = rng::stream(seed, i as u64);
            let mut x = x0.clone();
            for _ in 0..steps {
                x = split_step(scheme, &x, &mut r)?.0;
            }
            Ok(f(&x))
        })
        .collect();
    let values = values.into_iter().collect::<Result<Vec<f64>>>()?;
    Ok((stats::mean(&values), (stats::variance(&values) / n_mc as f64).sqrt()))
}

/// E[x_n] exactly for linear subflows: each substep contributes
/// E[e^{cτA}] = (I − cA)⁻¹ (Exponential) or e^{cA} (Deterministic), c = ε/N.
pub fn linear_exact_mean(scheme: &SplitScheme, x0: &DVector<f64>, steps: usize) -> Result<DVector<f64>> {
    let ms = match scheme.fields.kind() {
        FieldKind::LinearExact(ms) => ms,
        _ => return Err(Error::invalid("exact means need linear subflows")),
    };
    let d = x0.len();
    let c = scheme.epsilon / ms.len() as f64;
    let mut cycle = DMatrix::identity(d, d);
    for a in ms {
        let step = match scheme.durations {
            Durations::Deterministic => linalg::expm(&(a * c)),
            Durations::Exponential => {
                let top = a
                    .clone()
                    .complex_eigenvalues()
                    .iter()
                    .map(|z| z.re)
                    .fold(f64::NEG_INFINITY, f64::max);
                if c * top >= 1.0 {
                    return Err(Error::invalid("E[exp(cτA)] is infinite for this epsilon"));
                }
                linalg::inverse(&(DMatrix::identity(d, d) - a * c), "I − cA")?
            }
        };
        cycle = step * cycle;
    }
    let mut x = x0.clone();
    for _ in 0..steps {
        x = &cycle * x;
    }
    Ok(x)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Estimator {
    MonteCarlo {
        n_mc: usize,
        seed: u64,
    },
    /// Exact expectation; linear subflows and a linear functional only.
    ExactLinear,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeakErrorRow {
    pub epsilon: f64,
    pub steps: usize,
    pub mean: f64,
    /// E f(x_n) − f(φ̄_t x0).
    pub error: f64,
    pub std_error: f64,
}

/// A functional of the state; `linear` enables the exact estimator.
pub struct Functional<'a> {
    pub f: &'a (dyn Fn(&DVector<f64>) -> f64 + Sync),
    pub linear: Option<DVector<f64>>,
}

impl<'a> Functional<'a> {
    pub fn new(f: &'a (dyn Fn(&DVector<f64>) -> f64 + Sync)) -> Self {
        Functional { f, linear: None }
    }
}

fn expectation(
    scheme: &SplitScheme,
    func: &Functional,
    x0: &DVector<f64>,
    steps: usize,
    est: Estimator,
    stage: u64,
) -> Result<(f64, f64)> {
    match est {
        Estimator::MonteCarlo { n_mc, seed } => {
            mc_expectation(scheme, func.f, x0, steps, n_mc, rng::derive_seed(seed, stage))
        }
        Estimator::ExactLinear => {
            let w = func
                .linear
                .as_ref()
                .ok_or_else(|| Error::invalid("exact estimator needs a linear functional"))?;
            Ok((w.dot(&linear_exact_mean(scheme, x0, steps)?), 0.0))
        }
    }
}

pub fn weak_error(
    scheme: &SplitScheme,
    func: &Functional,
    x0: &DVector<f64>,
    t: f64,
    eps_list: &[f64],
    est: Estimator,
) -> Result<Vec<WeakErrorRow>> {
    let reference = (func.f)(&scheme.reference_flow(x0, t)?);
    eps_list
        .iter()
        .enumerate()
        .map(|(k, &eps)| {
            let s = scheme.with_epsilon(eps)?;
            let steps = steps_for(t, eps)?;
            let (mean, se) = expectation(&s, func, x0, steps, est, k as u64)?;
            Ok(WeakErrorRow {
                epsilon: eps,
                steps,
                mean,
                error: mean - reference,
                std_error: se,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RichardsonRow {
    pub epsilon: f64,
    pub reference: f64,
    pub raw: f64,
    pub raw_half: f64,
    /// 2 E f(x_{ε/2}) − E f(x_ε).
    pub extrapolated: f64,
    pub raw_error: f64,
    pub extrapolated_error: f64,
    pub raw_std_error: f64,
    pub std_error: f64,
}

pub fn richardson(
    scheme: &SplitScheme,
    func: &Functional,
    x0: &DVector<f64>,
    t: f64,
    eps: f64,
    est: Estimator,
) -> Result<RichardsonRow> {
    richardson_at(scheme, func, x0, t, eps, est, 0)
}

fn richardson_at(
    scheme: &SplitScheme,
    func: &Functional,
    x0: &DVector<f64>,
    t: f64,
    eps: f64,
    est: Estimator,
    stage: u64,
) -> Result<RichardsonRow> {
    let reference = (func.f)(&scheme.reference_flow(x0, t)?);
    let coarse = scheme.with_epsilon(eps)?;
    let fine = scheme.with_epsilon(0.5 * eps)?;
    let (raw, se) = expectation(&coarse, func, x0, steps_for(t, eps)?, est, 2 * stage)?;
    let (half, se_half) = expectation(&fine, func, x0, steps_for(t, 0.5 * eps)?, est, 2 * stage + 1)?;
    let extrapolated = 2.0 * half - raw;
    Ok(RichardsonRow {
        epsilon: eps,
        reference,
        raw,
        raw_half: half,
        extrapolated,
        raw_error: raw - reference,
        extrapolated_error: extrapolated - reference,
        raw_std_error: se,
        std_error: (4.0 * se_half * se_half + se * se).sqrt(),
    })
}

pub fn richardson_table(
    scheme: &SplitScheme,
    func: &Functional,
    x0: &DVector<f64>,
    t: f64,
    eps_list: &[f64],
    est: Estimator,
) -> Result<Vec<RichardsonRow>> {
    eps_list
        .iter()
        .enumerate()
        .map(|(k, &eps)| richardson_at(scheme, func, x0, t, eps, est, k as u64))
        .collect()
}

/// The canonical non-commuting pair A₁ = [[0,1],[0,0]], A₂ = [[−1,0],[0,0]].
pub fn benchmark_linear_pair() -> Vec<DMatrix<f64>> {
    vec![
        DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]),
        DMatrix::from_row_slice(2, 2, &[-1.0, 0.0, 0.0, 0.0]),
    ]
}
