//! Small statistics toolkit: moments, weighted regression, two-sample
//! tests and Gaussian quadrature.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};
use statrs::distribution::{Beta, ContinuousCDF, Normal};

use crate::error::{FadeError, Result};

pub fn mean(x: &[f64]) -> f64 {
    if x.is_empty() {
        return f64::NAN;
    }
    x.iter().sum::<f64>() / x.len() as f64
}

/// Unbiased sample variance.
pub fn variance(x: &[f64]) -> f64 {
    let n = x.len();
    if n < 2 {
        return f64::NAN;
    }
    let m = mean(x);
    x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1) as f64
}

pub fn median(x: &[f64]) -> f64 {
    if x.is_empty() {
        return f64::NAN;
    }
    let mut v = x.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn normal_cdf(x: f64, mean: f64, sd: f64) -> f64 {
    Normal::new(mean, sd).map(|n| n.cdf(x)).unwrap_or(f64::NAN)
}

pub fn normal_quantile(p: f64) -> f64 {
    Normal::new(0.0, 1.0).map(|n| n.inverse_cdf(p)).unwrap_or(f64::NAN)
}

/// One-sided Clopper–Pearson upper confidence bound for a binomial
/// proportion with `k` successes in `n` trials at level `1 − alpha`.
pub fn clopper_pearson_upper(k: usize, n: usize, alpha: f64) -> f64 {
    if n == 0 {
        return 1.0;
    }
    if k == 0 {
        return 1.0 - alpha.powf(1.0 / n as f64);
    }
    if k >= n {
        return 1.0;
    }
    Beta::new(k as f64 + 1.0, (n - k) as f64)
        .map(|b| b.inverse_cdf(1.0 - alpha))
        .unwrap_or(1.0)
}

/// Result of a (weighted) least-squares line fit `y ≈ intercept + slope·x`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    pub slope_se: f64,
    pub intercept_se: f64,
    pub r2: f64,
    pub n: usize,
}

/// Ordinary least squares.
pub fn fit_line(x: &[f64], y: &[f64]) -> Result<LineFit> {
    let w = vec![1.0; x.len()];
    fit_line_weighted(x, y, &w, false)
}

/// Weighted least squares with weights `w` (inverse variances when
/// `known_variance`, in which case standard errors are not rescaled by
/// the residual variance).
pub fn fit_line_weighted(x: &[f64], y: &[f64], w: &[f64], known_variance: bool) -> Result<LineFit> {
    let n = x.len();
    if y.len() != n || w.len() != n {
        return Err(FadeError::DimensionMismatch {
            expected: n,
            got: y.len().min(w.len()),
        });
    }
    if n < 2 {
        return Err(FadeError::Insufficient(format!("line fit needs ≥ 2 points, got {n}")));
    }
    let sw: f64 = w.iter().sum();
    let xm = x.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / sw;
    let ym = y.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / sw;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    let mut syy = 0.0;
    for i in 0..n {
        let dx = x[i] - xm;
        let dy = y[i] - ym;
        sxx += w[i] * dx * dx;
        sxy += w[i] * dx * dy;
        syy += w[i] * dy * dy;
    }
    if !(sxx > 0.0) {
        return Err(FadeError::Insufficient("line fit needs distinct x values".into()));
    }
    let slope = sxy / sxx;
    let intercept = ym - slope * xm;
    let rss: f64 = (0..n)
        .map(|i| {
            let e = y[i] - intercept - slope * x[i];
            w[i] * e * e
        })
        .sum();
    let r2 = if syy > 0.0 { 1.0 - rss / syy } else { 1.0 };
    let scale = if known_variance {
        1.0
    } else if n > 2 {
        rss / (n - 2) as f64
    } else {
        0.0
    };
    let slope_var = scale / sxx;
    let intercept_var = scale * (1.0 / sw + xm * xm / sxx);
    Ok(LineFit {
        slope,
        intercept,
        slope_se: slope_var.sqrt(),
        intercept_se: intercept_var.sqrt(),
        r2,
        n,
    })
}

/// Kolmogorov limiting survival function `Q(λ) = 2 Σ (−1)^{k−1} e^{−2k²λ²}`.
fn kolmogorov_q(lambda: f64) -> f64 {
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut sum = 0.0;
    let mut sign = 1.0;
    for k in 1..=200 {
        let term = (-2.0 * (k * k) as f64 * lambda * lambda).exp();
        sum += sign * term;
        if term < 1e-17 {
            break;
        }
        sign = -sign;
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

fn ks_pvalue(d: f64, n_eff: f64) -> f64 {
    let en = n_eff.sqrt();
    kolmogorov_q((en + 0.12 + 0.11 / en) * d)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KsResult {
    pub statistic: f64,
    pub p_value: f64,
}

impl KsResult {
    pub fn passes(&self, alpha: f64) -> bool {
        self.p_value >= alpha
    }
}

/// Two-sample Kolmogorov–Smirnov test.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> Result<KsResult> {
    if a.is_empty() || b.is_empty() {
        return Err(FadeError::Insufficient("KS test needs non-empty samples".into()));
    }
    let mut x = a.to_vec();
    let mut y = b.to_vec();
    x.sort_by(|p, q| p.total_cmp(q));
    y.sort_by(|p, q| p.total_cmp(q));
    let (n, m) = (x.len(), y.len());
    let (mut i, mut j) = (0, 0);
    let mut d = 0.0f64;
    while i < n && j < m {
        let v = x[i].min(y[j]);
        while i < n && x[i] <= v {
            i += 1;
        }
        while j < m && y[j] <= v {
            j += 1;
        }
        d = d.max((i as f64 / n as f64 - j as f64 / m as f64).abs());
    }
    let n_eff = (n * m) as f64 / (n + m) as f64;
    Ok(KsResult {
        statistic: d,
        p_value: ks_pvalue(d, n_eff),
    })
}

/// One-sample Kolmogorov–Smirnov test against a continuous cdf.
pub fn ks_one_sample<F: Fn(f64) -> f64>(a: &[f64], cdf: F) -> Result<KsResult> {
    if a.is_empty() {
        return Err(FadeError::Insufficient("KS test needs a non-empty sample".into()));
    }
    let mut x = a.to_vec();
    x.sort_by(|p, q| p.total_cmp(q));
    let n = x.len() as f64;
    let mut d = 0.0f64;
    for (i, v) in x.iter().enumerate() {
        let f = cdf(*v);
        d = d.max(f - i as f64 / n).max((i + 1) as f64 / n - f);
    }
    Ok(KsResult {
        statistic: d,
        p_value: ks_pvalue(d, n),
    })
}

/// Energy distance with a permutation p-value, from the pooled pairwise
/// distance matrix (first `n_a` rows belong to sample A).
pub fn energy_test(dist: &DMatrix<f64>, n_a: usize, n_perm: usize, seed: u64) -> Result<KsResult> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let n = dist.nrows();
    if n_a == 0 || n_a >= n {
        return Err(FadeError::Insufficient("energy test needs two non-empty samples".into()));
    }
    let stat = |labels: &[usize]| -> f64 {
        let (a, b) = labels.split_at(n_a);
        let mut ab = 0.0;
        for &i in a {
            for &j in b {
                ab += dist[(i, j)];
            }
        }
        let mut aa = 0.0;
        for &i in a {
            for &j in a {
                aa += dist[(i, j)];
            }
        }
        let mut bb = 0.0;
        for &i in b {
            for &j in b {
                bb += dist[(i, j)];
            }
        }
        let na = a.len() as f64;
        let nb = b.len() as f64;
        2.0 * ab / (na * nb) - aa / (na * na) - bb / (nb * nb)
    };
    let mut labels: Vec<usize> = (0..n).collect();
    let observed = stat(&labels);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut exceed = 0usize;
    for _ in 0..n_perm {
        labels.shuffle(&mut rng);
        if stat(&labels) >= observed - 1e-12 * observed.abs() {
            exceed += 1;
        }
    }
    Ok(KsResult {
        statistic: observed,
        p_value: (exceed + 1) as f64 / (n_perm + 1) as f64,
    })
}

/// Nodes and weights for `E g(Z)`, `Z ~ N(0, 1)`, exact for polynomials
/// of degree `< 2n` (Golub–Welsch on the probabilists' Hermite recursion).
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    if n == 0 {
        return (Vec::new(), Vec::new());
    }
    let mut jac = DMatrix::zeros(n, n);
    for i in 1..n {
        let b = (i as f64).sqrt();
        jac[(i, i - 1)] = b;
        jac[(i - 1, i)] = b;
    }
    let eig = SymmetricEigen::new(jac);
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|i| {
            let v0 = eig.eigenvectors[(0, i)];
            (eig.eigenvalues[i], v0 * v0)
        })
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    pairs.into_iter().unzip()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn line_fit_recovers_exact_line() {
        let x = [0.0, 1.0, 2.0, 3.0];
        let y: Vec<f64> = x.iter().map(|v| 2.0 - 0.5 * v).collect();
        let f = fit_line(&x, &y).unwrap();
        assert!((f.slope + 0.5).abs() < 1e-14);
        assert!((f.intercept - 2.0).abs() < 1e-14);
        assert!((f.r2 - 1.0).abs() < 1e-14);
        assert!(fit_line(&[1.0, 1.0], &[0.0, 1.0]).is_err());
    }

    #[test]
    fn hermite_moments() {
        let (x, w) = gauss_hermite(6);
        let m = |p: i32| x.iter().zip(&w).map(|(a, b)| b * a.powi(p)).sum::<f64>();
        assert!((m(0) - 1.0).abs() < 1e-13);
        assert!(m(1).abs() < 1e-13);
        assert!((m(2) - 1.0).abs() < 1e-12);
        assert!((m(4) - 3.0).abs() < 1e-11);
        assert!((m(10) - 945.0).abs() < 1e-8);
    }

    #[test]
    fn ks_identical_samples() {
        let a: Vec<f64> = (0..100).map(|i| i as f64).collect();
        let r = ks_two_sample(&a, &a).unwrap();
        assert_eq!(r.statistic, 0.0);
        assert_eq!(r.p_value, 1.0);
        let b: Vec<f64> = a.iter().map(|v| v + 1000.0).collect();
        let r = ks_two_sample(&a, &b).unwrap();
        assert_eq!(r.statistic, 1.0);
        assert!(r.p_value < 1e-10);
    }

    #[test]
    fn kolmogorov_tail_value() {
        // Q(1.36) ≈ 0.049 is the classic 5% critical point
        assert!((kolmogorov_q(1.358) - 0.05).abs() < 1e-3);
    }

    #[test]
    fn clopper_pearson_zero_hits() {
        let u = clopper_pearson_upper(0, 1000, 0.05);
        assert!((u - (1.0 - 0.05f64.powf(1e-3))).abs() < 1e-15);
        let u = clopper_pearson_upper(5, 100, 0.05);
        assert!(u > 0.05 && u < 0.15);
    }
}
