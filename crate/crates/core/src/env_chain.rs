//! Finite-state environment chains and the i.i.d. resampling kernel.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::Exp1;

use crate::error::{Error, Result};
use crate::linalg;

const ROW_SUM_REPAIR: f64 = 1e-12;

/// Transition-rate matrix of an irreducible continuous-time chain.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvGenerator {
    rates: DMatrix<f64>,
}

impl EnvGenerator {
    pub fn new(rates: DMatrix<f64>) -> Result<Self> {
        let n = rates.nrows();
        if n == 0 || rates.ncols() != n {
            return Err(Error::invalid(format!(
                "rate matrix must be square and non-empty, got {}x{}",
                rates.nrows(),
                rates.ncols()
            )));
        }
        if !linalg::is_finite_matrix(&rates) {
            return Err(Error::NonFinite("rate matrix entry".into()));
        }
        let mut rates = rates;
        for i in 0..n {
            let mut off = 0.0;
            for j in 0..n {
                if i != j {
                    if rates[(i, j)] < 0.0 {
                        return Err(Error::invalid(format!(
                            "negative off-diagonal rate Q[{i}][{j}] = {}",
                            rates[(i, j)]
                        )));
                    }
                    off += rates[(i, j)];
                }
            }
            let drift = (off + rates[(i, i)]).abs();
            if drift > ROW_SUM_REPAIR * off.max(1.0) {
                return Err(Error::invalid(format!(
                    "row {i} of the rate matrix sums to {drift:e}, not 0"
                )));
            }
            rates[(i, i)] = -off;
        }
        check_irreducible(&rates)?;
        Ok(EnvGenerator { rates })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::invalid("rate matrix rows have unequal lengths"));
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        Self::new(DMatrix::from_row_slice(n, n, &flat))
    }

    /// Q = [[-p, p], [q, -q]].
    pub fn two_state(p: f64, q: f64) -> Result<Self> {
        Self::new(DMatrix::from_row_slice(2, 2, &[-p, p, q, -q]))
    }

    /// A random irreducible generator: a directed cycle plus sparse extra
    /// edges, rates uniform in [0.1, 2].
    pub fn random<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Self {
        let mut q = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let on_cycle = j == (i + 1) % n;
                if on_cycle || rng.random::<f64>() < 0.5 {
                    q[(i, j)] = rng.random_range(0.1..2.0);
                }
            }
        }
        for i in 0..n {
            let s: f64 = q.row(i).sum();
            q[(i, i)] = -s;
        }
        Self::new(q).expect("cycle makes the generator irreducible")
    }

    pub fn n(&self) -> usize {
        self.rates.nrows()
    }

    pub fn rates(&self) -> &DMatrix<f64> {
        &self.rates
    }
}

fn reachable(q: &DMatrix<f64>, transpose: bool) -> Vec<bool> {
    let n = q.nrows();
    let mut seen = vec![false; n];
    let mut stack = vec![0];
    seen[0] = true;
    while let Some(i) = stack.pop() {
        for j in 0..n {
            let w = if transpose { q[(j, i)] } else { q[(i, j)] };
            if i != j && w > 0.0 && !seen[j] {
                seen[j] = true;
                stack.push(j);
            }
        }
    }
    seen
}

pub(crate) fn check_irreducible(q: &DMatrix<f64>) -> Result<()> {
    if let Some(to) = reachable(q, false).iter().position(|r| !r) {
        return Err(Error::NotIrreducible { from: 0, to });
    }
    if let Some(from) = reachable(q, true).iter().position(|r| !r) {
        return Err(Error::NotIrreducible { from, to: 0 });
    }
    Ok(())
}

/// Stationary law of the environment.
#[derive(Debug, Clone, PartialEq)]
pub struct StationaryDist {
    pi: DVector<f64>,
}

impl StationaryDist {
    pub fn new(pi: Vec<f64>) -> Result<Self> {
        if pi.is_empty() {
            return Err(Error::invalid("empty probability vector"));
        }
        if pi.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite("probability vector entry".into()));
        }
        if pi.iter().any(|&p| p <= 0.0) {
            return Err(Error::invalid("probability vector must have positive entries"));
        }
        let total: f64 = pi.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("probabilities sum to {total}, not 1")));
        }
        let pi = DVector::from_vec(pi) / total;
        Ok(StationaryDist { pi })
    }

    pub fn n(&self) -> usize {
        self.pi.len()
    }

    pub fn vector(&self) -> &DVector<f64> {
        &self.pi
    }

    pub fn as_slice(&self) -> &[f64] {
        self.pi.as_slice()
    }

    /// πf.
    pub fn mean(&self, f: &[f64]) -> f64 {
        self.pi.iter().zip(f).map(|(p, v)| p * v).sum()
    }

    /// Π = 1πᵀ.
    pub fn projector(&self) -> DMatrix<f64> {
        let n = self.n();
        DMatrix::from_fn(n, n, |_, j| self.pi[j])
    }
}

/// Matrix X representing the operator Q⁻¹ f = ∫₀^∞ Q_t(πf − f) dt.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoInverse {
    x: DMatrix<f64>,
}

impl PseudoInverse {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn apply(&self, f: &[f64]) -> Vec<f64> {
        let v = &self.x * DVector::from_column_slice(f);
        v.iter().copied().collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum EnvKind {
    RateMatrix(EnvGenerator),
    /// Jumps at rate 1 to an independent draw from π: Qf = πf − f.
    Resample(StationaryDist),
}

impl EnvKind {
    pub fn n(&self) -> usize {
        match self {
            EnvKind::RateMatrix(g) => g.n(),
            EnvKind::Resample(pi) => pi.n(),
        }
    }

    pub fn stationary(&self) -> Result<StationaryDist> {
        match self {
            EnvKind::RateMatrix(g) => stationary(g),
            EnvKind::Resample(pi) => Ok(pi.clone()),
        }
    }

    /// The generator as a matrix (Π − I for the resampling kernel).
    pub fn generator_matrix(&self) -> DMatrix<f64> {
        match self {
            EnvKind::RateMatrix(g) => g.rates().clone(),
            EnvKind::Resample(pi) => {
                let n = pi.n();
                pi.projector() - DMatrix::identity(n, n)
            }
        }
    }

    pub fn pseudo_inverse(&self) -> Result<PseudoInverse> {
        match self {
            EnvKind::RateMatrix(g) => pseudo_inverse(g),
            EnvKind::Resample(_) => Ok(PseudoInverse {
                x: self.generator_matrix(),
            }),
        }
    }

    /// Decay rate of the slowest transient mode of Q_t.
    pub fn spectral_gap(&self) -> f64 {
        match self {
            EnvKind::RateMatrix(g) => linalg::generator_gap(g.rates()),
            EnvKind::Resample(pi) if pi.n() == 1 => f64::INFINITY,
            EnvKind::Resample(_) => 1.0,
        }
    }

    pub fn semigroup_at(&self, t: f64) -> Result<DMatrix<f64>> {
        check_time(t)?;
        Ok(linalg::expm(&(self.generator_matrix() * t)))
    }
}

fn check_time(t: f64) -> Result<()> {
    if !t.is_finite() || t < 0.0 {
        return Err(Error::NonFinite(format!("time {t} must be finite and nonnegative")));
    }
    Ok(())
}

pub fn stationary(gen: &EnvGenerator) -> Result<StationaryDist> {
    let n = gen.n();
    if n == 1 {
        return StationaryDist::new(vec![1.0]);
    }
    // πQ = 0 with the last equation replaced by Σπ = 1
    let mut a = gen.rates().transpose();
    for j in 0..n {
        a[(n - 1, j)] = 1.0;
    }
    let mut b = DVector::zeros(n);
    b[n - 1] = 1.0;
    let pi = linalg::solve(&a, &b, "stationary distribution")?;
    let resid = (pi.transpose() * gen.rates()).amax();
    if resid > 1e-10 * linalg::norm_1(gen.rates()).max(1.0) {
        return Err(Error::SingularSystem(format!("stationary residual {resid:e}")));
    }
    if pi.iter().any(|&p| p <= 0.0) {
        return Err(Error::SingularSystem(
            "stationary solve produced a non-positive weight".into(),
        ));
    }
    let total = pi.sum();
    Ok(StationaryDist { pi: pi / total })
}

/// X = Π − (Π − Q)⁻¹.
pub fn pseudo_inverse(gen: &EnvGenerator) -> Result<PseudoInverse> {
    let pi = stationary(gen)?;
    let proj = pi.projector();
    let fundamental = linalg::inverse(&(&proj - gen.rates()), "Π − Q")?;
    Ok(PseudoInverse { x: proj - fundamental })
}

pub fn apply_pseudo_inverse(env: &EnvKind, f: &[f64]) -> Result<Vec<f64>> {
    if f.len() != env.n() {
        return Err(Error::invalid(format!(
            "function has {} entries for {} states",
            f.len(),
            env.n()
        )));
    }
    match env {
        EnvKind::RateMatrix(g) => Ok(pseudo_inverse(g)?.apply(f)),
        EnvKind::Resample(pi) => {
            let m = pi.mean(f);
            Ok(f.iter().map(|v| m - v).collect())
        }
    }
}

pub fn semigroup_at(gen: &EnvGenerator, t: f64) -> Result<DMatrix<f64>> {
    check_time(t)?;
    Ok(linalg::expm(&(gen.rates() * t)))
}

/// Precomputed exit rates and jump tables for exact path sampling.
#[derive(Debug, Clone)]
pub struct JumpSampler {
    exit_rate: Vec<f64>,
    cumulative: Vec<Vec<f64>>,
    targets: Vec<Vec<usize>>,
}

impl JumpSampler {
    pub fn new(env: &EnvKind) -> Self {
        let n = env.n();
        let mut exit_rate = Vec::with_capacity(n);
        let mut cumulative = Vec::with_capacity(n);
        let mut targets = Vec::with_capacity(n);
        match env {
            EnvKind::RateMatrix(g) => {
                let q = g.rates();
                for i in 0..n {
                    let rate = -q[(i, i)];
                    let mut acc = 0.0;
                    let mut cum = Vec::new();
                    let mut tg = Vec::new();
                    for j in 0..n {
                        if j != i && q[(i, j)] > 0.0 {
                            acc += q[(i, j)] / rate;
                            cum.push(acc);
                            tg.push(j);
                        }
                    }
                    exit_rate.push(rate);
                    cumulative.push(cum);
                    targets.push(tg);
                }
            }
            EnvKind::Resample(pi) => {
                let mut acc = 0.0;
                let cum: Vec<f64> = pi
                    .as_slice()
                    .iter()
                    .map(|p| {
                        acc += p;
                        acc
                    })
                    .collect();
                for _ in 0..n {
                    exit_rate.push(1.0);
                    cumulative.push(cum.clone());
                    targets.push((0..n).collect());
                }
            }
        }
        JumpSampler {
            exit_rate,
            cumulative,
            targets,
        }
    }

    pub fn exit_rate(&self, s: usize) -> f64 {
        self.exit_rate[s]
    }

    /// Holding time in environment-time units (infinite for a single state).
    pub fn holding_time<R: Rng + ?Sized>(&self, s: usize, rng: &mut R) -> f64 {
        let e: f64 = rng.sample(Exp1);
        e / self.exit_rate[s]
    }

    pub fn next_state<R: Rng + ?Sized>(&self, s: usize, rng: &mut R) -> usize {
        let cum = &self.cumulative[s];
        if cum.is_empty() {
            return s;
        }
        let u: f64 = rng.random::<f64>() * cum[cum.len() - 1];
        let k = cum.partition_point(|&c| c <= u).min(cum.len() - 1);
        self.targets[s][k]
    }
}

/// Exact jump-chain path on [0, horizon]; the first entry is (0, s0).
pub fn sample_path<R: Rng + ?Sized>(env: &EnvKind, s0: usize, horizon: f64, rng: &mut R) -> Result<Vec<(f64, usize)>> {
    if s0 >= env.n() {
        return Err(Error::invalid(format!("initial state {s0} out of range")));
    }
    check_time(horizon)?;
    let sampler = JumpSampler::new(env);
    let mut path = vec![(0.0, s0)];
    let mut t = 0.0;
    let mut s = s0;
    loop {
        t += sampler.holding_time(s, rng);
        if t > horizon {
            return Ok(path);
        }
        s = sampler.next_state(s, rng);
        path.push((t, s));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn two_state_stationary() {
        let g = EnvGenerator::two_state(0.3, 1.7).unwrap();
        let pi = stationary(&g).unwrap();
        assert!((pi.as_slice()[0] - 1.7 / 2.0).abs() < 1e-15);
        assert!((pi.as_slice()[1] - 0.3 / 2.0).abs() < 1e-15);
    }

    #[test]
    fn single_state() {
        let g = EnvGenerator::from_rows(&[vec![0.0]]).unwrap();
        assert_eq!(stationary(&g).unwrap().as_slice(), &[1.0]);
        assert_eq!(pseudo_inverse(&g).unwrap().matrix()[(0, 0)], 0.0);
    }

    #[test]
    fn reducible_rejected() {
        let err =
            EnvGenerator::from_rows(&[vec![-1.0, 1.0, 0.0], vec![0.0, 0.0, 0.0], vec![0.0, 1.0, -1.0]]).unwrap_err();
        assert!(matches!(err, Error::NotIrreducible { .. }));
    }

    #[test]
    fn row_sum_repair_and_rejection() {
        let g = EnvGenerator::from_rows(&[vec![-1.0 + 5e-13, 1.0], vec![2.0, -2.0]]).unwrap();
        assert_eq!(g.rates()[(0, 0)], -1.0);
        assert!(EnvGenerator::from_rows(&[vec![-1.1, 1.0], vec![2.0, -2.0]]).is_err());
        assert!(EnvGenerator::from_rows(&[vec![1.0, -1.0], vec![2.0, -2.0]]).is_err());
    }

    #[test]
    fn two_state_pseudo_inverse_closed_form() {
        let (p, q) = (0.7, 2.2);
        let g = EnvGenerator::two_state(p, q).unwrap();
        let x = pseudo_inverse(&g).unwrap();
        let expect = g.rates() / ((p + q) * (p + q));
        assert!((x.matrix() - expect).amax() < 1e-15);
    }

    #[test]
    fn apply_examples() {
        let r = EnvKind::Resample(StationaryDist::new(vec![0.5, 0.5]).unwrap());
        assert_eq!(apply_pseudo_inverse(&r, &[3.0, 3.0]).unwrap(), vec![0.0, 0.0]);
        assert_eq!(apply_pseudo_inverse(&r, &[1.0, 0.0]).unwrap(), vec![-0.5, 0.5]);
        let m = EnvKind::RateMatrix(EnvGenerator::two_state(1.0, 1.0).unwrap());
        let v = apply_pseudo_inverse(&m, &[1.0, 0.0]).unwrap();
        assert!((v[0] + 0.25).abs() < 1e-15 && (v[1] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn resample_pseudo_inverse_is_generator() {
        let pi = StationaryDist::new(vec![0.2, 0.3, 0.5]).unwrap();
        let env = EnvKind::Resample(pi);
        let x = env.pseudo_inverse().unwrap();
        let q = env.generator_matrix();
        assert!((x.matrix() - &q).amax() == 0.0);
        // group-inverse axioms also hold for Π − I
        assert!((&q * x.matrix() * &q - &q).amax() < 1e-14);
    }

    #[test]
    fn semigroup_two_state_spectral() {
        let g = EnvGenerator::two_state(1.0, 1.0).unwrap();
        let pi = stationary(&g).unwrap().projector();
        let id = DMatrix::<f64>::identity(2, 2);
        for t in [0.0, 0.3, 2.0] {
            let e = semigroup_at(&g, t).unwrap();
            let oracle = &pi + (&id - &pi) * (-2.0 * t).exp();
            assert!((e - oracle).amax() < 1e-14);
        }
        assert!(semigroup_at(&g, -1.0).is_err());
        assert!(semigroup_at(&g, f64::NAN).is_err());
    }

    #[test]
    fn semigroup_rows_converge_to_pi() {
        let mut r = rng::stream(1, 0);
        let g = EnvGenerator::random(5, &mut r);
        let pi = stationary(&g).unwrap();
        let e = semigroup_at(&g, 200.0).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                assert!((e[(i, j)] - pi.as_slice()[j]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn zero_horizon_path() {
        let env = EnvKind::RateMatrix(EnvGenerator::two_state(1.0, 2.0).unwrap());
        let mut r = rng::stream(3, 0);
        assert_eq!(sample_path(&env, 1, 0.0, &mut r).unwrap(), vec![(0.0, 1)]);
    }

    #[test]
    fn gap_of_resample() {
        let env = EnvKind::Resample(StationaryDist::new(vec![0.4, 0.6]).unwrap());
        assert_eq!(env.spectral_gap(), 1.0);
    }
}
