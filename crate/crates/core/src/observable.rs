//! Observables f(x, s): smooth in x, one function per environment state.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::env_chain::StationaryDist;
use crate::error::{Error, Result};

pub type ObsFn = Arc<dyn Fn(&DVector<f64>, usize) -> f64 + Send + Sync>;
pub type ObsGrad = Arc<dyn Fn(&DVector<f64>, usize) -> DVector<f64> + Send + Sync>;

#[derive(Clone)]
pub struct ObservableF {
    n_states: usize,
    value: ObsFn,
    grad: Option<ObsGrad>,
}

impl fmt::Debug for ObservableF {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ObservableF")
            .field("n_states", &self.n_states)
            .field("analytic_gradient", &self.grad.is_some())
            .finish()
    }
}

impl ObservableF {
    pub fn new(n_states: usize, value: ObsFn) -> Self {
        ObservableF {
            n_states,
            value,
            grad: None,
        }
    }

    pub fn with_gradient(mut self, grad: ObsGrad) -> Self {
        self.grad = Some(grad);
        self
    }

    /// f(x, s) = c_s + b_s·x + xᵀ M_s x, with analytic gradient.
    pub fn quadratic(c: Vec<f64>, b: Vec<DVector<f64>>, m: Option<Vec<DMatrix<f64>>>) -> Result<Self> {
        let n = c.len();
        if n == 0 || b.len() != n || m.as_ref().is_some_and(|m| m.len() != n) {
            return Err(Error::invalid("observable coefficients must have one entry per state"));
        }
        let d = b[0].len();
        if b.iter().any(|v| v.len() != d)
            || m.as_ref()
                .is_some_and(|m| m.iter().any(|a| a.nrows() != d || a.ncols() != d))
        {
            return Err(Error::invalid("observable coefficients have inconsistent dimensions"));
        }
        if c.iter().chain(b.iter().flat_map(|v| v.iter())).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("observable coefficient".into()));
        }
        let (c1, b1, m1) = (c.clone(), b.clone(), m.clone());
        let value: ObsFn = Arc::new(move |x: &DVector<f64>, s: usize| {
            let mut v = c1[s] + b1[s].dot(x);
            if let Some(m) = &m1 {
                v += x.dot(&(&m[s] * x));
            }
            v
        });
        let grad: ObsGrad = Arc::new(move |x: &DVector<f64>, s: usize| {
            let mut g = b[s].clone();
            if let Some(m) = &m {
                g += (&m[s] + m[s].transpose()) * x;
            }
            g
        });
        Ok(ObservableF::new(n, value).with_gradient(grad))
    }

    /// f(x, s) = values[s].
    pub fn state_only(values: Vec<f64>, dim: usize) -> Self {
        let n = values.len();
        let b = vec![DVector::zeros(dim); n];
        Self::quadratic(values, b, None).expect("consistent by construction")
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn has_analytic_gradient(&self) -> bool {
        self.grad.is_some()
    }

    pub fn eval(&self, x: &DVector<f64>, s: usize) -> f64 {
        (self.value)(x, s)
    }

    /// ∇_x f(x, s), analytic if supplied, else central differences
    /// with step 1e-5·(1 + |x|).
    pub fn gradient(&self, x: &DVector<f64>, s: usize) -> DVector<f64> {
        if let Some(g) = &self.grad {
            return g(x, s);
        }
        let h = 1e-5 * (1.0 + x.norm());
        DVector::from_fn(x.len(), |i, _| {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += h;
            xm[i] -= h;
            (self.eval(&xp, s) - self.eval(&xm, s)) / (2.0 * h)
        })
    }

    pub fn values(&self, x: &DVector<f64>) -> Vec<f64> {
        (0..self.n_states).map(|s| self.eval(x, s)).collect()
    }

    /// πf(x).
    pub fn pi_mean(&self, pi: &StationaryDist, x: &DVector<f64>) -> f64 {
        pi.mean(&self.values(x))
    }

    /// ∇(πf)(x).
    pub fn pi_gradient(&self, pi: &StationaryDist, x: &DVector<f64>) -> DVector<f64> {
        pi.as_slice()
            .iter()
            .enumerate()
            .fold(DVector::zeros(x.len()), |acc, (s, p)| acc + self.gradient(x, s) * *p)
    }

    pub fn check_finite_at(&self, x: &DVector<f64>) -> Result<()> {
        if self.values(x).iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite("observable value".into()))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_value_and_gradient() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 0.0, 3.0]);
        let f = ObservableF::quadratic(
            vec![1.0, 0.0],
            vec![DVector::from_vec(vec![1.0, -1.0]), DVector::zeros(2)],
            Some(vec![m, DMatrix::zeros(2, 2)]),
        )
        .unwrap();
        let x = DVector::from_vec(vec![0.5, 2.0]);
        // 1 + (0.5 − 2) + (0.25 + 2 + 12)
        assert!((f.eval(&x, 0) - 13.75).abs() < 1e-14);
        let fd = ObservableF::new(
            2,
            Arc::new({
                let f = f.clone();
                move |x: &DVector<f64>, s: usize| f.eval(x, s)
            }),
        );
        let g = f.gradient(&x, 0);
        let gfd = fd.gradient(&x, 0);
        assert!((g - gfd).amax() < 1e-8);
    }
}
