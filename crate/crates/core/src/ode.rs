//! Dormand–Prince 5(4) integration, adaptive and fixed-step.
//!
//! The adaptive stepper exposes single accepted steps so callers can watch
//! the trajectory (region checks, stopping rules). The fixed-step driver is a
//! smooth function of its initial condition, which matters when its output is
//! differentiated numerically.

use nalgebra::DVector;

use crate::error::{Error, Result};

pub type Rhs<'a> = &'a dyn Fn(f64, &DVector<f64>) -> DVector<f64>;
pub type Projection<'a> = &'a dyn Fn(&mut DVector<f64>);

const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;

const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const B1: f64 = 35.0 / 384.0;
const B3: f64 = 500.0 / 1113.0;
const B4: f64 = 125.0 / 192.0;
const B5: f64 = -2187.0 / 6784.0;
const B6: f64 = 11.0 / 84.0;
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

#[derive(Debug, Clone, Copy)]
pub struct OdeOptions {
    pub rtol: f64,
    pub atol: f64,
    pub h_min: f64,
    pub max_steps: usize,
}

impl Default for OdeOptions {
    fn default() -> Self {
        OdeOptions {
            rtol: 1e-10,
            atol: 1e-10,
            h_min: 1e-14,
            max_steps: 5_000_000,
        }
    }
}

impl OdeOptions {
    pub fn with_tol(tol: f64) -> Self {
        OdeOptions {
            rtol: tol,
            atol: tol,
            ..Default::default()
        }
    }
}

/// One Dormand–Prince step: returns (5th-order solution, error estimate, f at the new point).
fn dp_stage(f: Rhs, t: f64, y: &DVector<f64>, k1: &DVector<f64>, h: f64) -> (DVector<f64>, DVector<f64>, DVector<f64>) {
    let k2 = f(t + C2 * h, &(y + k1 * (h * A21)));
    let k3 = f(t + C3 * h, &(y + (k1 * A31 + &k2 * A32) * h));
    let k4 = f(t + C4 * h, &(y + (k1 * A41 + &k2 * A42 + &k3 * A43) * h));
    let k5 = f(t + C5 * h, &(y + (k1 * A51 + &k2 * A52 + &k3 * A53 + &k4 * A54) * h));
    let k6 = f(
        t + h,
        &(y + (k1 * A61 + &k2 * A62 + &k3 * A63 + &k4 * A64 + &k5 * A65) * h),
    );
    let y_new = y + (k1 * B1 + &k3 * B3 + &k4 * B4 + &k5 * B5 + &k6 * B6) * h;
    let k7 = f(t + h, &y_new);
    let err = (k1 * E1 + &k3 * E3 + &k4 * E4 + &k5 * E5 + &k6 * E6 + &k7 * E7) * h;
    (y_new, err, k7)
}

pub struct Dopri5<'a> {
    f: Rhs<'a>,
    pub t: f64,
    pub y: DVector<f64>,
    k1: DVector<f64>,
    h: f64,
    opts: OdeOptions,
    steps: usize,
}

impl<'a> Dopri5<'a> {
    pub fn new(f: Rhs<'a>, t0: f64, y0: DVector<f64>, opts: OdeOptions) -> Self {
        let k1 = f(t0, &y0);
        let h = initial_step(&y0, &k1, &opts);
        Dopri5 {
            f,
            t: t0,
            y: y0,
            k1,
            h,
            opts,
            steps: 0,
        }
    }

    /// Replaces the current state (after a projection, say).
    pub fn set_state(&mut self, y: DVector<f64>) {
        self.k1 = (self.f)(self.t, &y);
        self.y = y;
    }

    pub fn last_step_size(&self) -> f64 {
        self.h
    }

    /// Takes one accepted step, never passing `t_end`.
    pub fn step(&mut self, t_end: f64) -> Result<()> {
        loop {
            let remaining = t_end - self.t;
            if remaining <= 0.0 {
                return Ok(());
            }
            self.steps += 1;
            if self.steps > self.opts.max_steps {
                return Err(Error::StepFailure { t: self.t, h: self.h });
            }
            let h = self.h.min(remaining);
            let (y_new, err, k7) = dp_stage(self.f, self.t, &self.y, &self.k1, h);
            let mut sq = 0.0;
            for i in 0..self.y.len() {
                let sc = self.opts.atol + self.opts.rtol * self.y[i].abs().max(y_new[i].abs());
                sq += (err[i] / sc).powi(2);
            }
            let en = (sq / self.y.len().max(1) as f64).sqrt();
            if !en.is_finite() {
                self.h = h * 0.2;
                if self.h < self.opts.h_min {
                    return Err(Error::StepFailure { t: self.t, h });
                }
                continue;
            }
            let fac = if en == 0.0 {
                5.0
            } else {
                (0.9 * en.powf(-0.2)).clamp(0.2, 5.0)
            };
            if en <= 1.0 {
                self.t = if h == remaining { t_end } else { self.t + h };
                self.y = y_new;
                self.k1 = k7;
                // do not let the clipped final step shrink the next proposal
                self.h = (h * fac).max(self.h.min(h * 5.0));
                return Ok(());
            }
            self.h = h * fac.min(1.0);
            if self.h < self.opts.h_min {
                return Err(Error::StepFailure { t: self.t, h: self.h });
            }
        }
    }

    pub fn advance_to(&mut self, t_end: f64) -> Result<()> {
        while self.t < t_end {
            self.step(t_end)?;
        }
        Ok(())
    }
}

fn initial_step(y0: &DVector<f64>, f0: &DVector<f64>, opts: &OdeOptions) -> f64 {
    let n = y0.len().max(1) as f64;
    let mut d0 = 0.0;
    let mut d1 = 0.0;
    for i in 0..y0.len() {
        let sc = opts.atol + opts.rtol * y0[i].abs();
        d0 += (y0[i] / sc).powi(2);
        d1 += (f0[i] / sc).powi(2);
    }
    let (d0, d1) = ((d0 / n).sqrt(), (d1 / n).sqrt());
    let h = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
    h.clamp(1e-10, 0.1)
}

/// Adaptive integration from `t0` to `t1`.
pub fn integrate(f: Rhs, t0: f64, y0: DVector<f64>, t1: f64, opts: OdeOptions) -> Result<DVector<f64>> {
    let mut solver = Dopri5::new(f, t0, y0, opts);
    solver.advance_to(t1)?;
    Ok(solver.y)
}

/// Fixed-step Dormand–Prince (5th-order weights) with an optional projection
/// after every step.
pub fn integrate_fixed(
    f: Rhs,
    t0: f64,
    y0: DVector<f64>,
    t1: f64,
    steps: usize,
    project: Option<Projection>,
) -> DVector<f64> {
    let steps = steps.max(1);
    let h = (t1 - t0) / steps as f64;
    let mut y = y0;
    let mut t = t0;
    for _ in 0..steps {
        let k1 = f(t, &y);
        let (y_new, _, _) = dp_stage(f, t, &y, &k1, h);
        y = y_new;
        if let Some(p) = project {
            p(&mut y);
        }
        t += h;
    }
    y
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exponential_decay() {
        let f = |_t: f64, y: &DVector<f64>| -y;
        let y = integrate(&f, 0.0, DVector::from_vec(vec![1.0]), 3.0, OdeOptions::default()).unwrap();
        assert!((y[0] - (-3.0f64).exp()).abs() < 1e-10);
    }

    #[test]
    fn harmonic_oscillator_adaptive() {
        let f = |_t: f64, y: &DVector<f64>| DVector::from_vec(vec![y[1], -y[0]]);
        let y = integrate(&f, 0.0, DVector::from_vec(vec![1.0, 0.0]), 10.0, OdeOptions::default()).unwrap();
        assert!((y[0] - 10f64.cos()).abs() < 1e-8);
        assert!((y[1] + 10f64.sin()).abs() < 1e-8);
    }

    #[test]
    fn fixed_step_is_fifth_order() {
        let f = |_t: f64, y: &DVector<f64>| DVector::from_vec(vec![y[1], -y[0]]);
        let err = |n| {
            let y = integrate_fixed(&f, 0.0, DVector::from_vec(vec![1.0, 0.0]), 2.0, n, None);
            (y[0] - 2f64.cos()).abs()
        };
        let ratio = err(40) / err(80);
        assert!(ratio > 25.0 && ratio < 40.0, "ratio {ratio}");
    }

    #[test]
    fn time_dependent_rhs() {
        let f = |t: f64, _y: &DVector<f64>| DVector::from_vec(vec![t.cos()]);
        let y = integrate(&f, 0.0, DVector::from_vec(vec![0.0]), 1.5, OdeOptions::default()).unwrap();
        assert!((y[0] - 1.5f64.sin()).abs() < 1e-10);
    }
}
