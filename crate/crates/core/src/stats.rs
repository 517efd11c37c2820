//! Statistical test helpers used by the distribution-level test suites and
//! the benchmark harness: two-sample Kolmogorov–Smirnov, chi-squared
//! goodness of fit, and simple summary statistics.

use statrs::distribution::{ChiSquared, ContinuousCDF};

/// Two-sample Kolmogorov–Smirnov statistic sup |F1 - F2|.
///
/// Inputs need not be sorted; NaNs are rejected by debug assertion.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> f64 {
    debug_assert!(a.iter().chain(b.iter()).all(|x| !x.is_nan()));
    let mut a: Vec<f64> = a.to_vec();
    let mut b: Vec<f64> = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (n, m) = (a.len(), b.len());
    let (mut i, mut j) = (0usize, 0usize);
    let mut sup: f64 = 0.0;
    while i < n && j < m {
        let x = a[i].min(b[j]);
        while i < n && a[i] <= x {
            i += 1;
        }
        while j < m && b[j] <= x {
            j += 1;
        }
        let d = (i as f64 / n as f64 - j as f64 / m as f64).abs();
        sup = sup.max(d);
    }
    sup
}

/// Asymptotic two-sample KS critical value at significance `alpha`.
pub fn ks_two_sample_critical(n: usize, m: usize, alpha: f64) -> f64 {
    let c = ((2.0 / alpha).ln() / 2.0).sqrt();
    c * ((n + m) as f64 / (n as f64 * m as f64)).sqrt()
}

/// One-sample KS statistic against a reference CDF. Data need not be sorted.
pub fn ks_one_sample<F: Fn(f64) -> f64>(data: &[f64], cdf: F) -> f64 {
    let mut xs: Vec<f64> = data.to_vec();
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    let mut sup: f64 = 0.0;
    for (i, &x) in xs.iter().enumerate() {
        let c = cdf(x);
        sup = sup.max((c - i as f64 / n).abs());
        sup = sup.max(((i + 1) as f64 / n - c).abs());
    }
    sup
}

/// One-sample KS critical value at significance `alpha`.
pub fn ks_one_sample_critical(n: usize, alpha: f64) -> f64 {
    ((2.0 / alpha).ln() / 2.0).sqrt() / (n as f64).sqrt()
}

/// Pearson chi-squared statistic and p-value for observed counts against
/// expected probabilities (which must sum to one over the cells).
pub fn chi_squared_test(observed: &[u64], expected_probs: &[f64]) -> (f64, f64) {
    assert_eq!(observed.len(), expected_probs.len());
    let n: u64 = observed.iter().sum();
    let mut stat = 0.0;
    for (&o, &p) in observed.iter().zip(expected_probs) {
        let e = p * n as f64;
        assert!(e > 0.0, "expected count must be positive");
        let d = o as f64 - e;
        stat += d * d / e;
    }
    let dof = (observed.len() - 1) as f64;
    let p_value = 1.0 - ChiSquared::new(dof).expect("dof > 0").cdf(stat);
    (stat, p_value)
}

/// Sample mean and standard error of the mean.
pub fn mean_and_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    assert!(n >= 2, "need at least two samples");
    let mean = xs.iter().sum::<f64>() / n as f64;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
    (mean, (var / n as f64).sqrt())
}

/// Percentile by linear interpolation on the sorted sample, q in [0, 1].
pub fn percentile(xs: &[f64], q: f64) -> f64 {
    assert!(!xs.is_empty());
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    v[lo] * (1.0 - frac) + v[hi] * frac
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn ks_two_sample_identical_is_zero() {
        let a = [0.1, 0.4, 0.9];
        assert_eq!(ks_two_sample(&a, &a), 0.0);
    }

    #[test]
    fn ks_two_sample_detects_shift() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a: Vec<f64> = (0..4000).map(|_| rng.random::<f64>()).collect();
        let b: Vec<f64> = (0..4000).map(|_| rng.random::<f64>() + 0.2).collect();
        let d = ks_two_sample(&a, &b);
        assert!(d > ks_two_sample_critical(4000, 4000, 0.01));
        let c: Vec<f64> = (0..4000).map(|_| rng.random::<f64>()).collect();
        let d0 = ks_two_sample(&a, &c);
        assert!(d0 < ks_two_sample_critical(4000, 4000, 0.001));
    }

    #[test]
    fn chi_squared_uniform_counts() {
        let (_, p) = chi_squared_test(&[250, 260, 245, 245], &[0.25; 4]);
        assert!(p > 0.5);
        let (_, p_bad) = chi_squared_test(&[400, 200, 200, 200], &[0.25; 4]);
        assert!(p_bad < 1e-6);
    }

    #[test]
    fn percentile_interpolates() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        assert!((percentile(&xs, 0.5) - 2.5).abs() < 1e-12);
        assert_eq!(percentile(&xs, 1.0), 4.0);
    }
}
