//! Simulation of (x(t), σ(t/ε)) and ergodic averages along it.

use std::num::NonZeroUsize;

use gauss_quad::legendre::GaussLegendre;
use nalgebra::DVector;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env_chain::{EnvKind, JumpSampler, StationaryDist};
use crate::error::{Error, Result};
use crate::flows::{logistic_bounds, FieldKind, Region, VectorFieldSet};
use crate::observable::ObservableF;
use crate::rng::{self, Stream};
use crate::stats;

/// Vector fields together with the environment driving them.
#[derive(Debug, Clone)]
pub struct ModulatedModel {
    pub fields: VectorFieldSet,
    pub env: EnvKind,
    pi: StationaryDist,
}

impl ModulatedModel {
    pub fn new(fields: VectorFieldSet, env: EnvKind) -> Result<Self> {
        if fields.n_states() != env.n() {
            return Err(Error::invalid(format!(
                "{} vector fields for {} environment states",
                fields.n_states(),
                env.n()
            )));
        }
        let pi = env.stationary()?;
        Ok(ModulatedModel { fields, env, pi })
    }

    pub fn pi(&self) -> &StationaryDist {
        &self.pi
    }

    /// Centre of the declared region (barycentre for the simplex).
    pub fn default_start(&self) -> DVector<f64> {
        match self.fields.region() {
            Region::Box { lo, hi } => DVector::from_iterator(lo.len(), lo.iter().zip(hi).map(|(l, h)| 0.5 * (l + h))),
            Region::Interval { lo, hi } => DVector::from_element(1, 0.5 * (lo + hi)),
            Region::Simplex { dim } => DVector::from_element(*dim, 1.0 / *dim as f64),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub epsilon: f64,
    pub horizon: f64,
    pub burn_in: f64,
    pub seed: u64,
    pub n_traj: usize,
    pub batch_count: usize,
    /// Spacing of the deterministic observation grid; `None` observes only
    /// jump instants and batch boundaries.
    pub sample_dt: Option<f64>,
    pub x0: Option<Vec<f64>>,
    /// Initial environment state; drawn from π when absent.
    pub s0: Option<usize>,
}

impl SimConfig {
    /// Burn-in 20% of the horizon, grid ε/8, 4 trajectories, 16 batches.
    pub fn new(epsilon: f64, horizon: f64) -> Self {
        SimConfig {
            epsilon,
            horizon,
            burn_in: 0.2 * horizon,
            seed: rng::DEFAULT_SEED,
            n_traj: 4,
            batch_count: 16,
            sample_dt: Some(epsilon / 8.0),
            x0: None,
            s0: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return Err(Error::invalid(format!(
                "epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        if !(self.horizon.is_finite() && self.burn_in > 0.0 && self.burn_in < self.horizon) {
            return Err(Error::invalid(format!(
                "need 0 < burn_in < horizon, got burn_in {} and horizon {}",
                self.burn_in, self.horizon
            )));
        }
        if self.batch_count < 8 {
            return Err(Error::invalid(format!(
                "batch_count must be at least 8, got {}",
                self.batch_count
            )));
        }
        if self.n_traj == 0 {
            return Err(Error::invalid("n_traj must be positive"));
        }
        if let Some(dt) = self.sample_dt {
            if !(dt > 0.0) || !dt.is_finite() {
                return Err(Error::invalid(format!("sample_dt must be positive, got {dt}")));
            }
        }
        Ok(())
    }

    fn batch_len(&self) -> f64 {
        (self.horizon - self.burn_in) / self.batch_count as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatchRecord {
    pub traj: usize,
    pub batch: usize,
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub config: SimConfig,
    pub effective_samples: usize,
    pub batches: Vec<BatchRecord>,
}

impl TrajectoryEstimate {
    fn from_batches(batches: Vec<BatchRecord>, config: &SimConfig) -> Self {
        let means: Vec<f64> = batches.iter().map(|b| b.mean).collect();
        let (mean, std_error) = stats::batch_means(&means);
        TrajectoryEstimate {
            mean,
            std_error,
            config: config.clone(),
            effective_samples: means.len(),
            batches,
        }
    }

    /// Spread of the per-trajectory means relative to the pooled error
    /// (values well above 1 hint at several invariant measures).
    pub fn dispersion_ratio(&self) -> f64 {
        let n = self.config.n_traj;
        if n < 2 {
            return 0.0;
        }
        let per_traj: Vec<f64> = (0..n)
            .map(|i| {
                let v: Vec<f64> = self.batches.iter().filter(|b| b.traj == i).map(|b| b.mean).collect();
                stats::mean(&v)
            })
            .collect();
        let expected = self.std_error * (n as f64).sqrt();
        if expected == 0.0 {
            return 0.0;
        }
        stats::variance(&per_traj).sqrt() / expected
    }
}

/// A piece of trajectory with constant environment state.
#[derive(Debug, Clone, Copy)]
pub struct Segment<'a> {
    pub t0: f64,
    pub t1: f64,
    pub x0: &'a DVector<f64>,
    pub x1: &'a DVector<f64>,
    pub s: usize,
    /// ln(1·z) increment for projective fields, 0 otherwise.
    pub log_mass: f64,
    /// Environment jumps at t1.
    pub ends_in_jump: bool,
}

fn draw_from<R: Rng + ?Sized>(pi: &StationaryDist, rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in pi.as_slice().iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    pi.n() - 1
}

fn initial_state(model: &ModulatedModel, cfg: &SimConfig, rng: &mut Stream) -> Result<(DVector<f64>, usize)> {
    let x0 = match &cfg.x0 {
        Some(v) => DVector::from_column_slice(v),
        None => model.default_start(),
    };
    if !model.fields.region().contains(&x0) {
        return Err(Error::invalid("initial point lies outside the declared region"));
    }
    let s0 = match cfg.s0 {
        Some(s) if s < model.env.n() => s,
        Some(s) => return Err(Error::invalid(format!("initial state {s} out of range"))),
        None => draw_from(model.pi(), rng),
    };
    Ok((x0, s0))
}

/// Simulates trajectory `traj` and hands every constant-environment segment to
/// `observer`. Segments are cut at environment jumps, grid points, the end of
/// burn-in and batch boundaries.
pub fn simulate_trajectory(
    model: &ModulatedModel,
    cfg: &SimConfig,
    traj: usize,
    observer: &mut dyn FnMut(&Segment),
) -> Result<()> {
    cfg.validate()?;
    let mut rng = rng::stream(cfg.seed, traj as u64);
    let (mut x, mut s) = initial_state(model, cfg, &mut rng)?;
    let sampler = JumpSampler::new(&model.env);
    let eps = cfg.epsilon;
    let batch_len = cfg.batch_len();

    let mut t = 0.0;
    let mut next_jump = eps * sampler.holding_time(s, &mut rng);
    let mut grid_k: u64 = 1;
    let mut batch_k: usize = 0;
    let next_grid = |k: u64| cfg.sample_dt.map_or(f64::INFINITY, |dt| k as f64 * dt);
    let next_batch = |k: usize| {
        if k > cfg.batch_count {
            f64::INFINITY
        } else {
            cfg.burn_in + k as f64 * batch_len
        }
    };

    while t < cfg.horizon {
        let t_break = next_grid(grid_k).min(next_batch(batch_k)).min(cfg.horizon);
        let jump = next_jump <= t_break;
        let t1 = if jump { next_jump } else { t_break };
        let (x1, log_mass) = model
            .fields
            .flow_with_mass(s, &x, t1 - t)
            .map_err(|e| shift_time(e, t))?;
        observer(&Segment {
            t0: t,
            t1,
            x0: &x,
            x1: &x1,
            s,
            log_mass,
            ends_in_jump: jump,
        });
        x = x1;
        t = t1;
        if jump {
            s = sampler.next_state(s, &mut rng);
            next_jump = t + eps * sampler.holding_time(s, &mut rng);
        }
        while next_grid(grid_k) <= t {
            grid_k += 1;
        }
        while next_batch(batch_k) <= t {
            batch_k += 1;
        }
    }
    Ok(())
}

fn shift_time(e: Error, t0: f64) -> Error {
    match e {
        Error::LeftRegion { t, distance } => Error::LeftRegion { t: t0 + t, distance },
        other => other,
    }
}

/// Simulates one trajectory, reporting (t, x, s) at the start and at the
/// end of every segment.
pub fn simulate(
    model: &ModulatedModel,
    cfg: &SimConfig,
    traj: usize,
    observer: &mut dyn FnMut(f64, &DVector<f64>, usize),
) -> Result<()> {
    let mut first = true;
    simulate_trajectory(model, cfg, traj, &mut |seg| {
        if first {
            observer(seg.t0, seg.x0, seg.s);
            first = false;
        }
        observer(seg.t1, seg.x1, seg.s);
    })
}

/// Integrates several segment functionals per batch over [burn_in, horizon]
/// and returns one estimate per functional. `integrand` adds each segment's
/// contribution (a time integral) into its output slice.
pub fn batch_integrals(
    model: &ModulatedModel,
    cfg: &SimConfig,
    k: usize,
    integrand: &(dyn Fn(&Segment, &mut [f64]) + Sync),
) -> Result<Vec<TrajectoryEstimate>> {
    cfg.validate()?;
    let batch_len = cfg.batch_len();
    if batch_len < 10.0 * cfg.epsilon {
        return Err(Error::DegenerateBatches {
            batches: cfg.batch_count,
        });
    }
    let per_traj: Vec<Result<Vec<Vec<f64>>>> = (0..cfg.n_traj)
        .into_par_iter()
        .map(|i| {
            let mut sums = vec![vec![0.0; k]; cfg.batch_count];
            let mut buf = vec![0.0; k];
            simulate_trajectory(model, cfg, i, &mut |seg| {
                if seg.t0 < cfg.burn_in {
                    return;
                }
                let mid = 0.5 * (seg.t0 + seg.t1);
                let b = (((mid - cfg.burn_in) / batch_len) as usize).min(cfg.batch_count - 1);
                buf.iter_mut().for_each(|v| *v = 0.0);
                integrand(seg, &mut buf);
                for j in 0..k {
                    sums[b][j] += buf[j];
                }
            })?;
            Ok(sums)
        })
        .collect();

    let mut records: Vec<Vec<BatchRecord>> = vec![Vec::new(); k];
    for (i, r) in per_traj.into_iter().enumerate() {
        let sums = r?;
        for (b, row) in sums.iter().enumerate() {
            for j in 0..k {
                records[j].push(BatchRecord {
                    traj: i,
                    batch: b,
                    mean: row[j] / batch_len,
                });
            }
        }
    }
    Ok(records
        .into_iter()
        .map(|r| TrajectoryEstimate::from_batches(r, cfg))
        .collect())
}

/// ∫ f(x_t, s) dt over one segment by 5-point Gauss–Legendre on the exact
/// (or adaptive) sub-flow from the segment start.
pub fn segment_integral(model: &ModulatedModel, seg: &Segment, f: &dyn Fn(&DVector<f64>, usize) -> f64) -> f64 {
    let len = seg.t1 - seg.t0;
    if len <= 0.0 {
        return 0.0;
    }
    GAUSS_5.integrate(0.0, len, |tau| {
        // the sub-flow stays on the already validated path
        let x = model.fields.flow(seg.s, seg.x0, tau).unwrap_or_else(|_| seg.x0.clone());
        f(&x, seg.s)
    })
}

static GAUSS_5: std::sync::LazyLock<GaussLegendre> =
    std::sync::LazyLock::new(|| GaussLegendre::new(NonZeroUsize::new(5).expect("nonzero")));

/// Time average of f over [burn_in, horizon], Gauss–Legendre within segments.
pub fn ergodic_average(model: &ModulatedModel, cfg: &SimConfig, f: &ObservableF) -> Result<TrajectoryEstimate> {
    if f.n_states() != model.env.n() {
        return Err(Error::invalid("observable and environment have different state counts"));
    }
    let integrand = |seg: &Segment, out: &mut [f64]| {
        out[0] = segment_integral(model, seg, &|x, s| f.eval(x, s));
    };
    Ok(batch_integrals(model, cfg, 1, &integrand)?.remove(0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContractionReport {
    /// η = p₀·inf a11.
    pub eta: f64,
    /// p₁/p₀.
    pub constant: f64,
    /// Largest observed slope of ln|x − y| between consecutive observations.
    pub sup_log_slope: f64,
    /// Decay rate of ln|x − y| fitted over the asymptotic regime, if any gap.
    pub fitted_rate: Option<f64>,
    /// Observations with gap > (1 + 1e-9)(p₁/p₀)e^{−ηt}|x₀ − y₀|.
    pub violations: usize,
    /// max over observations of gap / bound.
    pub worst_ratio: f64,
    pub paths: usize,
}

/// Runs copies from x0 and y0 driven by the same environment path on
/// `cfg.n_traj` seeded paths and checks |x_t − y_t| ≤ (p₁/p₀)e^{−ηt}|x₀ − y₀|.
pub fn coupled_contraction(
    model: &ModulatedModel,
    cfg: &SimConfig,
    x0: f64,
    y0: f64,
    s0: usize,
) -> Result<ContractionReport> {
    let (a10, a11) = match model.fields.kind() {
        FieldKind::LogisticExact { a10, a11 } => (a10.clone(), a11.clone()),
        _ => return Err(Error::invalid("coupled contraction needs a logistic model")),
    };
    let (p0, p1) = logistic_bounds(&a10, &a11)?;
    for v in [x0, y0] {
        if v < p0 - 1e-12 || v > p1 + 1e-12 {
            return Err(Error::invalid(format!("start {v} outside [{p0}, {p1}]")));
        }
    }
    if s0 >= model.env.n() {
        return Err(Error::invalid(format!("initial state {s0} out of range")));
    }
    let eta = p0 * a11.iter().copied().fold(f64::INFINITY, f64::min);
    let constant = p1 / p0;
    let gap0 = (x0 - y0).abs();
    let sampler = JumpSampler::new(&model.env);
    let dt = cfg.sample_dt.unwrap_or(cfg.epsilon);

    // (sup log-slope, bound violations, worst gap/bound ratio, (t, gap) trace)
    type Run = (f64, usize, f64, Vec<(f64, f64)>);
    let runs: Vec<Run> = (0..cfg.n_traj)
        .into_par_iter()
        .map(|i| {
            let mut rng = rng::stream(cfg.seed, i as u64);
            let (mut x, mut y, mut s) = (x0, y0, s0);
            let mut t = 0.0;
            let mut next_jump = cfg.epsilon * sampler.holding_time(s, &mut rng);
            let mut k: u64 = 1;
            let mut sup_slope = f64::NEG_INFINITY;
            let mut violations = 0;
            let mut worst: f64 = 0.0;
            let mut trace = vec![(0.0, gap0)];
            while t < cfg.horizon {
                let t_grid = (k as f64 * dt).min(cfg.horizon);
                let jump = next_jump <= t_grid;
                let t1 = if jump { next_jump } else { t_grid };
                let h = t1 - t;
                let gap_before = (x - y).abs();
                x = crate::flows::logistic_flow(a10[s], a11[s], x, h);
                y = crate::flows::logistic_flow(a10[s], a11[s], y, h);
                t = t1;
                let gap = (x - y).abs();
                if gap0 > 0.0 {
                    let bound = constant * (-eta * t).exp() * gap0;
                    let ratio = gap / bound;
                    worst = worst.max(ratio);
                    if gap > (1.0 + 1e-9) * bound {
                        violations += 1;
                    }
                    if gap > 0.0 && gap_before > 0.0 && h > 0.0 {
                        sup_slope = sup_slope.max((gap / gap_before).ln() / h);
                    }
                    trace.push((t, gap));
                }
                if jump {
                    s = sampler.next_state(s, &mut rng);
                    next_jump = t + cfg.epsilon * sampler.holding_time(s, &mut rng);
                }
                while k as f64 * dt <= t {
                    k += 1;
                }
            }
            (sup_slope, violations, worst, trace)
        })
        .collect();

    let mut sup_log_slope = f64::NEG_INFINITY;
    let mut violations = 0;
    let mut worst_ratio: f64 = 0.0;
    let mut fit_t = Vec::new();
    let mut fit_y = Vec::new();
    for (slope, v, w, trace) in &runs {
        sup_log_slope = sup_log_slope.max(*slope);
        violations += v;
        worst_ratio = worst_ratio.max(*w);
        // asymptotic regime: gap between 1e-10 and 1e-4 of its initial value,
        // clear of both the transient and roundoff
        for &(t, g) in trace {
            if gap0 > 0.0 && g <= 1e-4 * gap0 && g >= 1e-10 * gap0 {
                fit_t.push(t);
                fit_y.push(g.ln());
            }
        }
    }
    let fitted_rate = if fit_t.len() >= 3 {
        Some(-stats::weighted_line(&fit_t, &fit_y, None).slope)
    } else {
        None
    };
    Ok(ContractionReport {
        eta,
        constant,
        sup_log_slope: if gap0 > 0.0 { sup_log_slope } else { f64::NEG_INFINITY },
        fitted_rate,
        violations,
        worst_ratio,
        paths: cfg.n_traj,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env_chain::EnvGenerator;

    fn logistic_model() -> ModulatedModel {
        let fields = VectorFieldSet::logistic(vec![1.0, 2.0], vec![1.0, 1.0]).unwrap();
        let env = EnvKind::RateMatrix(EnvGenerator::two_state(1.0, 1.0).unwrap());
        ModulatedModel::new(fields, env).unwrap()
    }

    #[test]
    fn config_validation() {
        let mut cfg = SimConfig::new(0.1, 10.0);
        assert!(cfg.validate().is_ok());
        cfg.batch_count = 4;
        assert!(cfg.validate().is_err());
        let mut cfg = SimConfig::new(0.1, 10.0);
        cfg.burn_in = 10.0;
        assert!(cfg.validate().is_err());
        assert!(SimConfig::new(0.0, 10.0).validate().is_err());
    }

    #[test]
    fn segments_tile_the_horizon() {
        let model = logistic_model();
        let cfg = SimConfig::new(0.1, 5.0);
        let mut last = 0.0;
        let mut jumps = 0;
        simulate_trajectory(&model, &cfg, 0, &mut |seg| {
            assert_eq!(seg.t0, last);
            assert!(seg.t1 > seg.t0);
            last = seg.t1;
            jumps += seg.ends_in_jump as usize;
        })
        .unwrap();
        assert_eq!(last, 5.0);
        assert!(jumps > 10);
    }

    #[test]
    fn short_horizon_rejected() {
        let model = logistic_model();
        let mut cfg = SimConfig::new(0.1, 2.0);
        cfg.burn_in = 0.5;
        let f = ObservableF::state_only(vec![0.0, 1.0], 1);
        assert!(matches!(
            ergodic_average(&model, &cfg, &f),
            Err(Error::DegenerateBatches { .. })
        ));
    }

    #[test]
    fn identical_starts_have_zero_gap() {
        let model = logistic_model();
        let mut cfg = SimConfig::new(0.1, 5.0);
        cfg.n_traj = 3;
        let r = coupled_contraction(&model, &cfg, 1.5, 1.5, 0).unwrap();
        assert_eq!(r.violations, 0);
        assert_eq!(r.worst_ratio, 0.0);
        assert!(r.fitted_rate.is_none());
    }
}
