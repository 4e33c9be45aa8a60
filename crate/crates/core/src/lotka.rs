//! Logistic resident x' = x(a₁₀^σ − a₁₁^σ x) and the invasion growth rate
//! Λ_y(ε) = ∫ (a₂₀^s + a₂₁^s x) μ_ε(dx, ds) of a rare second species.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::env_chain::{EnvGenerator, EnvKind, StationaryDist};
use crate::error::{Error, Result};
use crate::flows::{self, VectorFieldSet};
use crate::observable::ObservableF;
use crate::pdmp_sim::{self, ModulatedModel, SimConfig, TrajectoryEstimate};

/// Magnitudes below this count as a zero sign.
pub const SIGN_TIE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LVCoefficients {
    pub a10: Vec<f64>,
    pub a11: Vec<f64>,
    pub a20: Vec<f64>,
    pub a21: Vec<f64>,
}

/// π-averages of the four coefficient families.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LVMeans {
    pub a10: f64,
    pub a11: f64,
    pub a20: f64,
    pub a21: f64,
}

impl LVCoefficients {
    pub fn new(a10: Vec<f64>, a11: Vec<f64>, a20: Vec<f64>, a21: Vec<f64>) -> Result<Self> {
        let n = a10.len();
        if n == 0 || a11.len() != n || a20.len() != n || a21.len() != n {
            return Err(Error::invalid("coefficient families must have one entry per state"));
        }
        if a10.iter().chain(&a11).chain(&a20).chain(&a21).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("Lotka-Volterra coefficient".into()));
        }
        flows::logistic_bounds(&a10, &a11)?;
        Ok(LVCoefficients { a10, a11, a20, a21 })
    }

    pub fn n_states(&self) -> usize {
        self.a10.len()
    }

    /// [p₀, p₁] with p₀ = inf a₁₀/a₁₁, p₁ = sup a₁₀/a₁₁.
    pub fn bounds(&self) -> (f64, f64) {
        flows::logistic_bounds(&self.a10, &self.a11).expect("validated on construction")
    }

    pub fn means(&self, pi: &StationaryDist) -> LVMeans {
        LVMeans {
            a10: pi.mean(&self.a10),
            a11: pi.mean(&self.a11),
            a20: pi.mean(&self.a20),
            a21: pi.mean(&self.a21),
        }
    }

    pub fn resident_fields(&self) -> VectorFieldSet {
        VectorFieldSet::logistic(self.a10.clone(), self.a11.clone()).expect("validated on construction")
    }

    pub fn model(&self, env: EnvKind) -> Result<ModulatedModel> {
        ModulatedModel::new(self.resident_fields(), env)
    }

    /// f(x, s) = a₂₀^s + a₂₁^s x.
    pub fn invasion_observable(&self) -> ObservableF {
        let b = self.a21.iter().map(|v| DVector::from_element(1, *v)).collect();
        ObservableF::quadratic(self.a20.clone(), b, None).expect("consistent by construction")
    }

    fn swapped(&self) -> Self {
        let sw = |v: &Vec<f64>| v.iter().rev().copied().collect();
        LVCoefficients {
            a10: sw(&self.a10),
            a11: sw(&self.a11),
            a20: sw(&self.a20),
            a21: sw(&self.a21),
        }
    }
}

fn check_states(coef: &LVCoefficients, env: &EnvKind) -> Result<()> {
    if coef.n_states() != env.n() {
        return Err(Error::invalid(format!(
            "{} coefficient states for {} environment states",
            coef.n_states(),
            env.n()
        )));
    }
    Ok(())
}

/// Monte Carlo Λ_y(ε): ergodic average of a₂₀ + a₂₁x along the resident.
pub fn invasion_rate_mc(coef: &LVCoefficients, env: &EnvKind, cfg: &SimConfig) -> Result<TrajectoryEstimate> {
    check_states(coef, env)?;
    let model = coef.model(env.clone())?;
    pdmp_sim::ergodic_average(&model, cfg, &coef.invasion_observable())
}

/// Λ_y(0) = ā₂₀ + ā₂₁ ā₁₀/ā₁₁.
pub fn lambda0(coef: &LVCoefficients, pi: &StationaryDist) -> f64 {
    let m = coef.means(pi);
    m.a20 + m.a21 * m.a10 / m.a11
}

/// c₁ = (ā₂₁ā₁₀²/ā₁₁) Σ_s π_s (a₁₀^s/ā₁₀ − a₁₁^s/ā₁₁) Q⁻¹(a₁₁/ā₁₁ − a₂₁/ā₂₁)(s).
pub fn c1_closed_form(coef: &LVCoefficients, env: &EnvKind) -> Result<f64> {
    check_states(coef, env)?;
    let pi = env.stationary()?;
    let m = coef.means(&pi);
    if m.a21 == 0.0 {
        return Err(Error::Degenerate("mean interaction coefficient is zero".into()));
    }
    Ok(m.a21 * m.a10 * m.a10 / m.a11 * contraction(coef, env, &pi, &m)?)
}

/// The π-sum of the closed form without its prefactor ā₂₁ā₁₀²/ā₁₁.
fn contraction(coef: &LVCoefficients, env: &EnvKind, pi: &StationaryDist, m: &LVMeans) -> Result<f64> {
    let u: Vec<f64> = (0..coef.n_states())
        .map(|s| coef.a11[s] / m.a11 - coef.a21[s] / m.a21)
        .collect();
    let qu = env.pseudo_inverse()?.apply(&u);
    Ok((0..coef.n_states())
        .map(|s| pi.as_slice()[s] * (coef.a10[s] / m.a10 - coef.a11[s] / m.a11) * qu[s])
        .sum())
}

/// Displayed two-state expression for the rate family [[−p, p], [1−p, −(1−p)]]:
/// p(1−p) a₁₀⁰a₁₀¹/(ā₁₀ā₁₁²ā₂₁) (a₁₁¹/a₁₀¹ − a₁₁⁰/a₁₀⁰)(a₁₁⁰a₂₁¹ − a₁₁¹a₂₁⁰).
/// It equals −c₁·ā₁₁/(ā₂₁ā₁₀²).
pub fn two_state_display(coef: &LVCoefficients, p: f64) -> Result<f64> {
    if coef.n_states() != 2 || !(p > 0.0 && p < 1.0) {
        return Err(Error::invalid("two states and p in (0, 1) required"));
    }
    let pi = StationaryDist::new(vec![1.0 - p, p])?;
    let m = coef.means(&pi);
    let (a10, a11, a21) = (&coef.a10, &coef.a11, &coef.a21);
    Ok(p * (1.0 - p) * a10[0] * a10[1] / (m.a10 * m.a11 * m.a11 * m.a21)
        * (a11[1] / a10[1] - a11[0] / a10[0])
        * (a11[0] * a21[1] - a11[1] * a21[0]))
}

/// Displayed resampling-kernel combination
/// E[a₁₀a₂₁]/(ā₁₀ā₂₁) + E[a₁₁²]/ā₁₁² − E[a₁₀a₁₁]/(ā₁₀ā₁₁) − E[a₁₁a₂₁]/(ā₁₁ā₂₁).
/// It equals c₁·ā₁₁/(ā₂₁ā₁₀²).
pub fn resample_display(coef: &LVCoefficients, pi: &StationaryDist) -> f64 {
    let m = coef.means(pi);
    let e = |f: &dyn Fn(usize) -> f64| (0..coef.n_states()).map(|s| pi.as_slice()[s] * f(s)).sum::<f64>();
    let (a10, a11, a21) = (&coef.a10, &coef.a11, &coef.a21);
    e(&|s| a10[s] * a21[s]) / (m.a10 * m.a21) + e(&|s| a11[s] * a11[s]) / (m.a11 * m.a11)
        - e(&|s| a10[s] * a11[s]) / (m.a10 * m.a11)
        - e(&|s| a11[s] * a21[s]) / (m.a11 * m.a21)
}

/// π(g Q⁻¹ g), which is ≤ 0 for every g.
pub fn variance_form(env: &EnvKind, g: &[f64]) -> Result<f64> {
    let pi = env.stationary()?;
    let qg = env.pseudo_inverse()?.apply(g);
    Ok((0..g.len()).map(|s| pi.as_slice()[s] * g[s] * qg[s]).sum())
}

/// −(ā₂₁ā₁₀²/ā₁₁³) π((a₁₁ − ā₁₁) Q⁻¹ (a₁₁ − ā₁₁)), valid when a₁₀ and a₂₁ are state-constant.
pub fn c1_constant_growth(coef: &LVCoefficients, env: &EnvKind) -> Result<f64> {
    check_states(coef, env)?;
    let pi = env.stationary()?;
    let m = coef.means(&pi);
    let g: Vec<f64> = coef.a11.iter().map(|v| v - m.a11).collect();
    Ok(-m.a21 * m.a10 * m.a10 / m.a11.powi(3) * variance_form(env, &g)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignReport {
    /// States were relabelled so that a₁₁¹/a₁₀¹ ≥ a₁₁⁰/a₁₀⁰.
    pub swapped: bool,
    pub c1: f64,
    /// a₁₁¹a₂₁⁰ − a₁₁⁰a₂₁¹ after relabelling.
    pub product: f64,
    pub c1_sign: i8,
    pub product_sign: i8,
    /// Either quantity is below the tie threshold.
    pub tie: bool,
    /// ā₂₁ < 0, where the sign identity is asserted.
    pub competitive: bool,
    /// `None` outside the competitive case or on a tie.
    pub agree: Option<bool>,
}

fn sign(v: f64) -> i8 {
    if v.abs() < SIGN_TIE {
        0
    } else if v > 0.0 {
        1
    } else {
        -1
    }
}

/// Compares sign(c₁) with sign(a₁₁¹a₂₁⁰ − a₁₁⁰a₂₁¹) for a two-state chain.
pub fn sign_analysis(coef: &LVCoefficients, gen: &EnvGenerator) -> Result<SignReport> {
    if coef.n_states() != 2 || gen.n() != 2 {
        return Err(Error::invalid("sign analysis needs two states"));
    }
    let ratio = |c: &LVCoefficients, s: usize| c.a11[s] / c.a10[s];
    let swapped = ratio(coef, 1) < ratio(coef, 0);
    let (c, g) = if swapped {
        let r = gen.rates();
        (coef.swapped(), EnvGenerator::two_state(r[(1, 0)], r[(0, 1)])?)
    } else {
        (coef.clone(), gen.clone())
    };
    let env = EnvKind::RateMatrix(g);
    let c1 = c1_closed_form(&c, &env)?;
    let product = c.a11[1] * c.a21[0] - c.a11[0] * c.a21[1];
    let (c1_sign, product_sign) = (sign(c1), sign(product));
    let tie = c1_sign == 0 || product_sign == 0;
    let competitive = c.means(&env.stationary()?).a21 < 0.0;
    let agree = (competitive && !tie).then_some(c1_sign == product_sign);
    Ok(SignReport {
        swapped,
        c1,
        product,
        c1_sign,
        product_sign,
        tie,
        competitive,
        agree,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn coef(a10: [f64; 2], a11: [f64; 2], a21: [f64; 2]) -> LVCoefficients {
        LVCoefficients::new(a10.to_vec(), a11.to_vec(), vec![0.2, -0.1], a21.to_vec()).unwrap()
    }

    #[test]
    fn constant_coefficients_give_zero() {
        let c = coef([1.0, 1.0], [2.0, 2.0], [-1.0, -1.0]);
        let env = EnvKind::RateMatrix(EnvGenerator::two_state(0.3, 0.7).unwrap());
        assert!(c1_closed_form(&c, &env).unwrap().abs() < 1e-15);
    }

    #[test]
    fn only_growth_varying_gives_zero() {
        let c = coef([1.0, 3.0], [2.0, 2.0], [-1.0, -1.0]);
        let env = EnvKind::RateMatrix(EnvGenerator::two_state(0.3, 0.7).unwrap());
        assert!(c1_closed_form(&c, &env).unwrap().abs() < 1e-14);
    }

    #[test]
    fn worked_sign_example() {
        let c = coef([1.0, 1.0], [1.0, 2.0], [-1.0, -1.0]);
        let r = sign_analysis(&c, &EnvGenerator::two_state(0.5, 0.5).unwrap()).unwrap();
        assert!(!r.swapped);
        assert_eq!(r.product_sign, -1);
        assert_eq!(r.c1_sign, -1);
        assert_eq!(r.agree, Some(true));
        // −(ā₂₁ā₁₀²/ā₁₁³)·π(gQ⁻¹g) with g = (−½, ½): −(−1/3.375)(−¼)
        assert!((r.c1 + 0.25 / 3.375).abs() < 1e-14);
    }

    #[test]
    fn identical_states_tie() {
        let c = coef([1.0, 1.0], [2.0, 2.0], [-1.0, -1.0]);
        let r = sign_analysis(&c, &EnvGenerator::two_state(0.5, 0.5).unwrap()).unwrap();
        assert!(r.tie);
        assert_eq!((r.c1_sign, r.product_sign), (0, 0));
        assert_eq!(r.agree, None);
    }

    #[test]
    fn rejects_nonpositive_competition() {
        assert!(LVCoefficients::new(vec![1.0], vec![0.0], vec![0.0], vec![1.0]).is_err());
    }
}
