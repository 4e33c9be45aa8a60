//! Batch means, Kolmogorov–Smirnov, weighted least squares.

use serde::{Deserialize, Serialize};

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample variance.
pub fn variance(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 2 {
        return 0.0;
    }
    let m = mean(xs);
    xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64
}

/// Mean of equally weighted batch means and its standard error.
pub fn batch_means(batches: &[f64]) -> (f64, f64) {
    let m = mean(batches);
    let se = (variance(batches) / batches.len() as f64).sqrt();
    (m, se)
}

/// Standard normal 0.99 quantile, for one-sided 99% bounds.
pub const Z_99: f64 = 2.326_347_874_040_841;

/// Sup distance between the empirical CDF of `samples` and `cdf`.
pub fn ks_statistic(samples: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut xs = samples.to_vec();
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = xs.len() as f64;
    let mut d: f64 = 0.0;
    for (i, &x) in xs.iter().enumerate() {
        let c = cdf(x);
        d = d.max((i as f64 + 1.0) / n - c).max(c - i as f64 / n);
    }
    d
}

/// Critical value of the one-sample KS statistic at level 0.01
/// (asymptotic Kolmogorov quantile with the Stephens small-sample correction).
pub fn ks_critical_01(n: usize) -> f64 {
    let sn = (n as f64).sqrt();
    1.627_61 / (sn + 0.12 + 0.11 / sn)
}

/// CDF of Gamma(k, rate) for integer shape k.
pub fn erlang_cdf(k: usize, rate: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    let lx = rate * x;
    let mut term = 1.0;
    let mut sum = 1.0;
    for i in 1..k {
        term *= lx / i as f64;
        sum += term;
    }
    1.0 - (-lx).exp() * sum
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub slope_se: f64,
    pub intercept_se: f64,
    pub residuals: Vec<f64>,
}

/// Weighted least squares fit y ≈ a + b x with weights w_i = 1/σ_i².
/// Standard errors are the model-based ones (known σ).
pub fn weighted_line(x: &[f64], y: &[f64], sigma: Option<&[f64]>) -> LinearFit {
    let n = x.len();
    let w: Vec<f64> = match sigma {
        Some(s) => s.iter().map(|s| 1.0 / (s * s).max(1e-300)).collect(),
        None => vec![1.0; n],
    };
    let sw: f64 = w.iter().sum();
    let sx: f64 = w.iter().zip(x).map(|(w, x)| w * x).sum();
    let sy: f64 = w.iter().zip(y).map(|(w, y)| w * y).sum();
    let sxx: f64 = w.iter().zip(x).map(|(w, x)| w * x * x).sum();
    let sxy: f64 = w.iter().zip(x).zip(y).map(|((w, x), y)| w * x * y).sum();
    let det = sw * sxx - sx * sx;
    let slope = (sw * sxy - sx * sy) / det;
    let intercept = (sxx * sy - sx * sxy) / det;
    let residuals: Vec<f64> = x.iter().zip(y).map(|(x, y)| y - intercept - slope * x).collect();
    let (slope_se, intercept_se) = if sigma.is_some() {
        ((sw / det).sqrt(), (sxx / det).sqrt())
    } else if n > 2 {
        let s2 = residuals.iter().map(|r| r * r).sum::<f64>() / (n - 2) as f64;
        ((s2 * sw / det).sqrt(), (s2 * sxx / det).sqrt())
    } else {
        (0.0, 0.0)
    };
    LinearFit {
        slope,
        intercept,
        slope_se,
        intercept_se,
        residuals,
    }
}

/// Slope of log|y| against log x.
pub fn log_log_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.abs().ln()).collect();
    weighted_line(&lx, &ly, None).slope
}

/// Weighted least squares for y ≈ c1 x + k x² (no intercept).
/// Returns (c1, k, se(c1), se(k)).
pub fn fit_linear_quadratic(x: &[f64], y: &[f64], sigma: &[f64]) -> (f64, f64, f64, f64) {
    let mut s11 = 0.0;
    let mut s12 = 0.0;
    let mut s22 = 0.0;
    let mut r1 = 0.0;
    let mut r2 = 0.0;
    for i in 0..x.len() {
        let w = 1.0 / (sigma[i] * sigma[i]).max(1e-300);
        let (a, b) = (x[i], x[i] * x[i]);
        s11 += w * a * a;
        s12 += w * a * b;
        s22 += w * b * b;
        r1 += w * a * y[i];
        r2 += w * b * y[i];
    }
    let det = s11 * s22 - s12 * s12;
    let c1 = (s22 * r1 - s12 * r2) / det;
    let k = (s11 * r2 - s12 * r1) / det;
    (c1, k, (s22 / det).sqrt(), (s11 / det).sqrt())
}
