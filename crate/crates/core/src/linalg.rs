//! Small dense linear algebra helpers: matrix exponential, square solves,
//! spectral gap of a generator.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

// Padé degree selection thresholds for the 1-norm of the argument
// (Higham, "The scaling and squaring method for the matrix exponential revisited").
const THETA_3: f64 = 1.495585217958292e-2;
const THETA_5: f64 = 2.539_398_330_063_23e-1;
const THETA_7: f64 = 9.504178996162932e-1;
const THETA_9: f64 = 2.097847961257068;
const THETA_13: f64 = 5.371920351148152;

const PADE_3: [f64; 4] = [120.0, 60.0, 12.0, 1.0];
const PADE_5: [f64; 6] = [30240.0, 15120.0, 3360.0, 420.0, 30.0, 1.0];
const PADE_7: [f64; 8] = [17297280.0, 8648640.0, 1995840.0, 277200.0, 25200.0, 1512.0, 56.0, 1.0];
const PADE_9: [f64; 10] = [
    17643225600.0,
    8821612800.0,
    2075673600.0,
    302702400.0,
    30270240.0,
    2162160.0,
    110880.0,
    3960.0,
    90.0,
    1.0,
];
const PADE_13: [f64; 14] = [
    64764752532480000.0,
    32382376266240000.0,
    7771770303897600.0,
    1187353796428800.0,
    129060195264000.0,
    10559470521600.0,
    670442572800.0,
    33522128640.0,
    1323241920.0,
    40840800.0,
    960960.0,
    16380.0,
    182.0,
    1.0,
];

pub fn norm_1(a: &DMatrix<f64>) -> f64 {
    a.column_iter()
        .map(|c| c.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Matrix exponential by scaling and squaring around a diagonal Padé core.
pub fn expm(a: &DMatrix<f64>) -> DMatrix<f64> {
    assert!(a.is_square(), "expm needs a square matrix");
    let n = a.nrows();
    if n == 0 {
        return DMatrix::zeros(0, 0);
    }
    let norm = norm_1(a);
    if norm == 0.0 {
        return DMatrix::identity(n, n);
    }
    let (u, v, squarings) = if norm < THETA_3 {
        let (u, v) = pade_low(a, &PADE_3);
        (u, v, 0)
    } else if norm < THETA_5 {
        let (u, v) = pade_low(a, &PADE_5);
        (u, v, 0)
    } else if norm < THETA_7 {
        let (u, v) = pade_low(a, &PADE_7);
        (u, v, 0)
    } else if norm < THETA_9 {
        let (u, v) = pade_low(a, &PADE_9);
        (u, v, 0)
    } else {
        let s = ((norm / THETA_13).log2().ceil()).max(0.0) as i32;
        let scaled = a * 2f64.powi(-s);
        let (u, v) = pade_13(&scaled);
        (u, v, s as u32)
    };

    let numer = &v + &u;
    let denom = &v - &u;
    let mut result = denom
        .lu()
        .solve(&numer)
        .expect("Padé denominator is nonsingular for the selected degree");
    for _ in 0..squarings {
        result = &result * &result;
    }
    result
}

/// Odd/even split of a Padé approximant of degree < 13: returns (U, V) with
/// r(A) = (V - U)^{-1} (V + U).
fn pade_low(a: &DMatrix<f64>, b: &[f64]) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = a.nrows();
    let ident = DMatrix::<f64>::identity(n, n);
    let a2 = a * a;
    let mut odd = &ident * b[1];
    let mut even = &ident * b[0];
    let mut power = ident.clone();
    for k in 1..b.len() / 2 {
        power = &power * &a2;
        odd += &power * b[2 * k + 1];
        even += &power * b[2 * k];
    }
    (a * odd, even)
}

fn pade_13(a: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let b = &PADE_13;
    let n = a.nrows();
    let ident = DMatrix::<f64>::identity(n, n);
    let a2 = a * a;
    let a4 = &a2 * &a2;
    let a6 = &a4 * &a2;

    let inner = &a6 * b[13] + &a4 * b[11] + &a2 * b[9];
    let u = a * (&a6 * inner + &a6 * b[7] + &a4 * b[5] + &a2 * b[3] + &ident * b[1]);
    let inner = &a6 * b[12] + &a4 * b[10] + &a2 * b[8];
    let v = &a6 * inner + &a6 * b[6] + &a4 * b[4] + &a2 * b[2] + &ident * b[0];
    (u, v)
}

/// Solves `a x = b` by partial-pivot LU, rejecting (near-)singular systems.
pub fn solve(a: &DMatrix<f64>, b: &DVector<f64>, what: &str) -> Result<DVector<f64>> {
    let lu = a.clone().lu();
    let x = lu.solve(b).ok_or_else(|| Error::SingularSystem(what.to_string()))?;
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::SingularSystem(what.to_string()));
    }
    let scale = norm_1(a) * x.amax() + b.amax();
    let resid = (a * &x - b).amax();
    if resid > 1e-8 * scale.max(1.0) {
        return Err(Error::SingularSystem(format!("{what}: residual {resid:e} after solve")));
    }
    Ok(x)
}

pub fn inverse(a: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let inv = a
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::SingularSystem(what.to_string()))?;
    if inv.iter().any(|v| !v.is_finite()) {
        return Err(Error::SingularSystem(what.to_string()));
    }
    let n = a.nrows();
    let resid = (a * &inv - DMatrix::<f64>::identity(n, n)).amax();
    if resid > 1e-8 {
        return Err(Error::SingularSystem(format!("{what}: inverse residual {resid:e}")));
    }
    Ok(inv)
}

/// Decay rate of the slowest non-stationary mode of a generator: the smallest
/// |Re λ| over eigenvalues other than the (simple) zero eigenvalue.
pub fn generator_gap(q: &DMatrix<f64>) -> f64 {
    let n = q.nrows();
    if n <= 1 {
        return f64::INFINITY;
    }
    let mut re: Vec<f64> = q.clone().complex_eigenvalues().iter().map(|z| -z.re).collect();
    re.sort_by(|a, b| a.partial_cmp(b).unwrap());
    // re[0] is the zero eigenvalue up to rounding
    re[1].max(0.0)
}

pub fn is_finite_matrix(a: &DMatrix<f64>) -> bool {
    a.iter().all(|v| v.is_finite())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn taylor_expm(a: &DMatrix<f64>) -> DMatrix<f64> {
        // independent oracle: scale down, long Taylor series, square back
        let n = a.nrows();
        let s = (norm_1(a).max(1.0)).log2().ceil() as i32 + 4;
        let b = a * 2f64.powi(-s);
        let mut term = DMatrix::<f64>::identity(n, n);
        let mut sum = term.clone();
        for k in 1..40 {
            term = &term * &b / k as f64;
            sum += &term;
        }
        for _ in 0..s {
            sum = &sum * &sum;
        }
        sum
    }

    #[test]
    fn expm_zero_is_identity() {
        let z = DMatrix::<f64>::zeros(3, 3);
        assert_eq!(expm(&z), DMatrix::identity(3, 3));
    }

    #[test]
    fn expm_matches_taylor_across_norms() {
        let base = DMatrix::from_row_slice(3, 3, &[-1.0, 0.3, 0.0, 2.0, -0.5, 1.0, 0.1, 0.4, -2.0]);
        for scale in [1e-3, 0.1, 0.5, 1.5, 4.0, 20.0] {
            let a = &base * scale;
            let e = expm(&a);
            let oracle = taylor_expm(&a);
            let rel = (&e - &oracle).amax() / oracle.amax();
            assert!(rel < 1e-12, "scale {scale}: rel err {rel:e}");
        }
    }

    #[test]
    fn expm_two_state_generator_closed_form() {
        let q = DMatrix::from_row_slice(2, 2, &[-1.0, 1.0, 1.0, -1.0]);
        for t in [0.1, 1.0, 3.7] {
            let e = expm(&(&q * t));
            let d = (-2.0 * t).exp();
            assert!((e[(0, 0)] - (0.5 + 0.5 * d)).abs() < 1e-14);
            assert!((e[(0, 1)] - (0.5 - 0.5 * d)).abs() < 1e-14);
        }
    }

    #[test]
    fn defective_matrix_exponential() {
        // Jordan block: exp(t J) = e^{-t} [[1, 0], [10 t, 1]]
        let a = DMatrix::from_row_slice(2, 2, &[-1.0, 0.0, 10.0, -1.0]);
        let t = 0.8;
        let e = expm(&(&a * t));
        let et = (-t).exp();
        assert!((e[(1, 0)] - 10.0 * t * et).abs() < 1e-13);
        assert!((e[(0, 0)] - et).abs() < 1e-14);
    }

    #[test]
    fn gap_of_two_state_generator() {
        let q = DMatrix::from_row_slice(2, 2, &[-0.3, 0.3, 1.2, -1.2]);
        assert!((generator_gap(&q) - 1.5).abs() < 1e-12);
    }

    #[test]
    fn singular_solve_rejected() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 4.0]);
        let b = DVector::from_vec(vec![1.0, 1.0]);
        assert!(matches!(solve(&a, &b, "test"), Err(Error::SingularSystem(_))));
    }
}
