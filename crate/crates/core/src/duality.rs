//! The diffusion transformation operator mapping a Gaussian signal level to
//! the discrete signal level induced by the argmax pushforward of the
//! Gaussian one-hot corruption, together with its series expansion, time
//! derivative, and a degree-9 polynomial surrogate.
//!
//! The operator is
//!
//! ```text
//!   T(a~) = K/(K-1) [ ∫ φ(z - ν) Φ^{K-1}(z) dz - 1/K ],   ν = a~/√(1 - a~²),
//! ```
//!
//! and the series form is `K/(K-1) [ e^{-ν²/2} Σ_n ν^n M_n / n! - 1/K ]`
//! with moments `M_n = ∫ zⁿ φ(z) Φ^{K-1}(z) dz`. The moments (and the
//! shifted moments `I_n = M_{n+1}` needed for the derivative) are cached so
//! repeated evaluations cost one short loop instead of a quadrature.

use crate::error::Error;
use crate::math;
use crate::schedules::{AlphaPoint, NoiseSchedule, Schedule};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Truncation half-width for the moment integrals. The integrands decay
/// like the standard normal density; the mass lost beyond +-12 is below
/// 2 Φ(-12) ≈ 3.6e-33 and is folded into the reported tolerance.
pub const MOMENT_DOMAIN: f64 = 12.0;

/// Default series length; the terms decay to zero well before this for
/// signal levels away from 1.
pub const DEFAULT_N_TERMS: usize = 150;

const CACHE_FORMAT_VERSION: u32 = 1;
const POLY_DEGREE: usize = 9;
const FIT_NODES: usize = 2048;
const SERIES_TAIL_TOL: f64 = 1e-14;

fn nu_of(alpha_tilde: f64) -> f64 {
    alpha_tilde / (1.0 - alpha_tilde * alpha_tilde).sqrt()
}

fn check_alpha_tilde(alpha_tilde: f64, allow_one: bool) -> Result<(), Error> {
    let hi_ok = if allow_one {
        alpha_tilde <= 1.0
    } else {
        alpha_tilde < 1.0
    };
    if !(alpha_tilde >= 0.0 && hi_ok) {
        return Err(Error::arg(format!(
            "alpha_tilde={alpha_tilde} outside [0, 1{}",
            if allow_one { "]" } else { ")" }
        )));
    }
    Ok(())
}

/// Φ^{K-1}(z) evaluated as exp((K-1) log Φ(z)) so it stays accurate for
/// vocabulary sizes in the tens of thousands.
fn pow_norm_cdf(z: f64, k_minus_1: f64) -> f64 {
    (k_minus_1 * math::log_norm_cdf(z)).exp()
}

/// Direct adaptive quadrature of the transformation operator.
///
/// Integrates `φ(u) Φ^{K-1}(u + ν)` over `[-12, 12]` in the shifted
/// variable, so the Gaussian mass is always centered in the domain no
/// matter how large ν grows.
pub fn transform_quadrature(k_vocab: usize, alpha_tilde: f64) -> Result<f64, Error> {
    check_vocab(k_vocab)?;
    check_alpha_tilde(alpha_tilde, false)?;
    let nu = nu_of(alpha_tilde);
    let km1 = (k_vocab - 1) as f64;
    let integral = math::integrate(
        |u| math::norm_pdf(u) * pow_norm_cdf(u + nu, km1),
        -MOMENT_DOMAIN,
        MOMENT_DOMAIN,
        1e-12,
        1e-16,
        512,
    )?;
    let k = k_vocab as f64;
    Ok((k / (k - 1.0) * (integral.value - 1.0 / k)).clamp(0.0, 1.0))
}

fn check_vocab(k_vocab: usize) -> Result<(), Error> {
    if k_vocab < 2 {
        return Err(Error::arg("vocabulary size must be at least 2"));
    }
    Ok(())
}

/// Cached moments and fitted polynomial for one vocabulary size.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TransformCache {
    format_version: u32,
    k_vocab: usize,
    n_terms: usize,
    /// M_n for n = 0..n_terms-1.
    moments: Vec<f64>,
    /// I_n = moment of order n+1, computed by its own quadrature.
    i_moments: Vec<f64>,
    /// Monomial coefficients c_0..c_9 of the degree-9 surrogate.
    poly_coeffs: Vec<f64>,
    /// Max-abs surrogate error against the series over the fit grid,
    /// measured at fit time.
    poly_max_abs_err: f64,
    /// Largest signal level at which the truncated series still meets the
    /// tail tolerance; evaluations above it return an error carrying this
    /// value.
    alpha_tilde_ceiling: f64,
}

impl TransformCache {
    /// Compute all moments by quadrature and fit the polynomial surrogate.
    pub fn build(k_vocab: usize, n_terms: usize) -> Result<Self, Error> {
        check_vocab(k_vocab)?;
        if n_terms < 1 {
            return Err(Error::arg("need at least one series term"));
        }
        let km1 = (k_vocab - 1) as f64;
        let moment = |order: usize| -> Result<f64, Error> {
            let r = math::integrate(
                |z| z.powi(order as i32) * math::norm_pdf(z) * pow_norm_cdf(z, km1),
                -MOMENT_DOMAIN,
                MOMENT_DOMAIN,
                1e-12,
                1e-306,
                512,
            )?;
            Ok(r.value)
        };
        let mut moments = Vec::with_capacity(n_terms);
        let mut i_moments = Vec::with_capacity(n_terms);
        for n in 0..n_terms {
            moments.push(moment(n)?);
            i_moments.push(moment(n + 1)?);
        }

        let mut cache = TransformCache {
            format_version: CACHE_FORMAT_VERSION,
            k_vocab,
            n_terms,
            moments,
            i_moments,
            poly_coeffs: vec![0.0; POLY_DEGREE + 1],
            poly_max_abs_err: 0.0,
            alpha_tilde_ceiling: 0.0,
        };
        cache.alpha_tilde_ceiling = cache.measure_ceiling();
        cache.fit_polynomial()?;
        Ok(cache)
    }

    pub fn k_vocab(&self) -> usize {
        self.k_vocab
    }

    pub fn n_terms(&self) -> usize {
        self.n_terms
    }

    pub fn moments(&self) -> &[f64] {
        &self.moments
    }

    pub fn shifted_moments(&self) -> &[f64] {
        &self.i_moments
    }

    pub fn poly_coefficients(&self) -> &[f64] {
        &self.poly_coeffs
    }

    /// Max-abs fit error of the polynomial surrogate, measured at fit time.
    pub fn poly_max_abs_error(&self) -> f64 {
        self.poly_max_abs_err
    }

    /// Largest usable signal level for the truncated series.
    pub fn alpha_tilde_ceiling(&self) -> f64 {
        self.alpha_tilde_ceiling
    }

    /// Series evaluation of the operator.
    ///
    /// Terms are accumulated through the recurrence
    /// `term_n = term_{n-1} · ν · (M_n / M_{n-1}) / n` starting from
    /// `e^{-ν²/2} M_0`, so every intermediate stays at the scale of the
    /// final sum and never overflows. All moments are positive, which makes
    /// the partial sums monotone.
    pub fn transform_series(&self, alpha_tilde: f64) -> Result<f64, Error> {
        Ok(self.series_core(alpha_tilde)?.0)
    }

    /// Series value together with d alpha / dt given the Gaussian level and
    /// its time derivative. Shares one term recurrence between the two sums.
    pub fn transform_with_derivative(
        &self,
        alpha_tilde: f64,
        alpha_tilde_prime: f64,
    ) -> Result<(f64, f64), Error> {
        let (value, bracket_sum) = self.series_core(alpha_tilde)?;
        let k = self.k_vocab as f64;
        let one_minus = 1.0 - alpha_tilde * alpha_tilde;
        let derivative =
            k / (k - 1.0) * alpha_tilde_prime / one_minus.powf(1.5) * bracket_sum;
        Ok((value, derivative))
    }

    /// d alpha / dt alone.
    pub fn transform_derivative(
        &self,
        alpha_tilde: f64,
        alpha_tilde_prime: f64,
    ) -> Result<f64, Error> {
        Ok(self
            .transform_with_derivative(alpha_tilde, alpha_tilde_prime)?
            .1)
    }

    /// Returns (operator value, Σ term_n (I_n/M_n - ν)) — the second sum is
    /// the derivative bracket Σ ν^n/n! e^{-ν²/2} (I_n - ν M_n).
    fn series_core(&self, alpha_tilde: f64) -> Result<(f64, f64), Error> {
        check_alpha_tilde(alpha_tilde, false)?;
        let nu = nu_of(alpha_tilde);
        let k = self.k_vocab as f64;
        let mut term = (-0.5 * nu * nu).exp() * self.moments[0];
        let mut sum = term;
        let mut bracket = term * (self.i_moments[0] / self.moments[0] - nu);
        for n in 1..self.n_terms {
            term *= nu * (self.moments[n] / self.moments[n - 1]) / n as f64;
            sum += term;
            bracket += term * (self.i_moments[n] / self.moments[n] - nu);
        }
        if !self.truncation_ok(nu, term) {
            return Err(Error::SeriesNotConverged {
                alpha_tilde,
                ceiling: self.alpha_tilde_ceiling,
            });
        }
        let value = (k / (k - 1.0) * (sum - 1.0 / k)).clamp(0.0, 1.0);
        Ok((value, bracket))
    }

    /// A truncated sum is trustworthy when the final term has decayed below
    /// tolerance and the term ratio at the cutoff is still shrinking. The
    /// ratio of consecutive terms at the cutoff is ν M_{n+1} / (M_n (n+1)),
    /// and M_{n_terms} is available as the last shifted moment.
    fn truncation_ok(&self, nu: f64, last_term: f64) -> bool {
        if nu == 0.0 {
            return true;
        }
        if last_term == 0.0 && (-0.5 * nu * nu).exp() == 0.0 {
            // The leading factor underflowed; every term is spuriously zero.
            return false;
        }
        let n = self.n_terms;
        let next_ratio = nu * (self.i_moments[n - 1] / self.moments[n - 1]) / n as f64;
        last_term.abs() <= SERIES_TAIL_TOL && next_ratio < 1.0
    }

    /// Horner evaluation of the degree-9 surrogate; valid on all of [0, 1].
    pub fn transform_polynomial(&self, alpha_tilde: f64) -> f64 {
        let mut acc = self.poly_coeffs[POLY_DEGREE];
        for c in self.poly_coeffs[..POLY_DEGREE].iter().rev() {
            acc = acc * alpha_tilde + c;
        }
        acc
    }

    fn measure_ceiling(&self) -> f64 {
        // Bisect for the largest signal level whose truncated series still
        // meets the tail tolerance; the zero-signal end always converges.
        let mut lo = 0.0;
        let mut hi = 1.0 - 1e-12;
        if self.tail_ok(hi) {
            return hi;
        }
        for _ in 0..80 {
            let mid = 0.5 * (lo + hi);
            if self.tail_ok(mid) {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        lo
    }

    fn tail_ok(&self, alpha_tilde: f64) -> bool {
        let nu = nu_of(alpha_tilde);
        let mut term = (-0.5 * nu * nu).exp() * self.moments[0];
        for n in 1..self.n_terms {
            term *= nu * (self.moments[n] / self.moments[n - 1]) / n as f64;
        }
        self.truncation_ok(nu, term)
    }

    fn fit_polynomial(&mut self) -> Result<(), Error> {
        // Chebyshev nodes in the signal level; with these nodes the discrete
        // Chebyshev basis is orthogonal and the least-squares projection is
        // a plain weighted sum.
        let n = FIT_NODES;
        let mut us = Vec::with_capacity(n);
        let mut targets = Vec::with_capacity(n);
        let ceiling = self.alpha_tilde_ceiling;
        for j in 0..n {
            let u = (std::f64::consts::PI * (2.0 * j as f64 + 1.0) / (2.0 * n as f64)).cos();
            let a = 0.5 + 0.5 * u;
            let t = if a <= ceiling {
                self.transform_series(a)?
            } else {
                transform_quadrature(self.k_vocab, a.min(1.0 - 1e-14))?
            };
            us.push(u);
            targets.push(t);
        }
        // Chebyshev coefficients by discrete orthogonality.
        let mut cheb = [0.0f64; POLY_DEGREE + 1];
        for j in 0..n {
            let theta = us[j].acos();
            for (a, c) in cheb.iter_mut().enumerate() {
                *c += targets[j] * (a as f64 * theta).cos();
            }
        }
        for (a, c) in cheb.iter_mut().enumerate() {
            *c *= if a == 0 { 1.0 } else { 2.0 } / n as f64;
        }
        // Convert Σ c_a T_a(u) with u = 2x - 1 into monomial coefficients in x.
        let mut poly_u = [0.0f64; POLY_DEGREE + 1];
        let mut t_prev = {
            let mut v = [0.0f64; POLY_DEGREE + 1];
            v[0] = 1.0;
            v
        };
        let mut t_curr = {
            let mut v = [0.0f64; POLY_DEGREE + 1];
            v[1] = 1.0;
            v
        };
        for (i, c) in poly_u.iter_mut().enumerate() {
            *c += cheb[0] * t_prev[i];
        }
        for a in 1..=POLY_DEGREE {
            for (i, c) in poly_u.iter_mut().enumerate() {
                *c += cheb[a] * t_curr[i];
            }
            if a < POLY_DEGREE {
                let mut t_next = [0.0f64; POLY_DEGREE + 1];
                for i in 0..POLY_DEGREE {
                    t_next[i + 1] += 2.0 * t_curr[i];
                }
                for i in 0..=POLY_DEGREE {
                    t_next[i] -= t_prev[i];
                }
                t_prev = t_curr;
                t_curr = t_next;
            }
        }
        // Substitute u = 2x - 1.
        let mut coeffs = vec![0.0f64; POLY_DEGREE + 1];
        let mut binom_pow = [0.0f64; POLY_DEGREE + 1];
        for (m, &cm) in poly_u.iter().enumerate() {
            // (2x - 1)^m expanded.
            binom_pow.fill(0.0);
            binom_pow[0] = 1.0;
            for _ in 0..m {
                let mut next = [0.0f64; POLY_DEGREE + 1];
                for i in 0..POLY_DEGREE {
                    next[i + 1] += 2.0 * binom_pow[i];
                }
                for i in 0..=POLY_DEGREE {
                    next[i] -= binom_pow[i];
                }
                binom_pow = next;
            }
            for i in 0..=POLY_DEGREE {
                coeffs[i] += cm * binom_pow[i];
            }
        }
        self.poly_coeffs = coeffs;
        // Record the fit error on the grid.
        let mut max_err = 0.0f64;
        for (j, &u) in us.iter().enumerate() {
            let a = 0.5 + 0.5 * u;
            max_err = max_err.max((self.transform_polynomial(a) - targets[j]).abs());
        }
        self.poly_max_abs_err = max_err;
        Ok(())
    }

    /// Write the cache as a JSON sidecar.
    pub fn save(&self, path: &Path) -> Result<(), Error> {
        let body = serde_json::to_string(self)?;
        std::fs::write(path, body)?;
        Ok(())
    }

    /// Load a sidecar, validating the versioned header fields.
    pub fn load(path: &Path) -> Result<Self, Error> {
        let body = std::fs::read_to_string(path)?;
        let cache: TransformCache = serde_json::from_str(&body)?;
        if cache.format_version != CACHE_FORMAT_VERSION {
            return Err(Error::CacheFormat(format!(
                "format version {} (expected {})",
                cache.format_version, CACHE_FORMAT_VERSION
            )));
        }
        if cache.moments.len() != cache.n_terms || cache.i_moments.len() != cache.n_terms {
            return Err(Error::CacheFormat("moment table length mismatch".into()));
        }
        if cache.poly_coeffs.len() != POLY_DEGREE + 1 {
            return Err(Error::CacheFormat("polynomial coefficient count".into()));
        }
        Ok(cache)
    }

    /// Load when a compatible sidecar exists, otherwise build and save.
    /// Returns `(cache, reused)`.
    pub fn load_or_build(
        path: &Path,
        k_vocab: usize,
        n_terms: usize,
    ) -> Result<(Self, bool), Error> {
        if path.exists() {
            match Self::load(path) {
                Ok(c) if c.k_vocab == k_vocab && c.n_terms == n_terms => return Ok((c, true)),
                _ => {}
            }
        }
        let cache = Self::build(k_vocab, n_terms)?;
        cache.save(path)?;
        Ok((cache, false))
    }
}

/// Closed form for K = 2: the operator reduces to a comparison of two
/// independent Gaussians, `2 Φ(ν/√2) - 1`.
pub fn transform_k2_analytic(alpha_tilde: f64) -> f64 {
    let nu = nu_of(alpha_tilde);
    2.0 * math::norm_cdf(nu / std::f64::consts::SQRT_2) - 1.0
}

/// Operator value and time derivative at any signal level in [0, 1):
/// the cached series below its usable ceiling, adaptive quadrature (with a
/// finite-difference rate) above it. The returned level is clamped into
/// (0, 1) so downstream losses with 1/alpha and 1/(1 - alpha) terms stay
/// finite; near the endpoints the true value is within one ulp of the
/// clamp anyway.
pub fn induced_alpha(
    cache: &TransformCache,
    alpha_tilde: f64,
    alpha_tilde_prime: f64,
) -> Result<(f64, f64), Error> {
    let (alpha, rate) = if alpha_tilde <= cache.alpha_tilde_ceiling() {
        cache.transform_with_derivative(alpha_tilde, alpha_tilde_prime)?
    } else {
        let value = transform_quadrature(cache.k_vocab(), alpha_tilde)?;
        let h = 1e-6f64.min(0.5 * (1.0 - alpha_tilde)).max(1e-9);
        let hi = transform_quadrature(cache.k_vocab(), (alpha_tilde + h).min(1.0 - 1e-15))?;
        let lo = transform_quadrature(cache.k_vocab(), alpha_tilde - h)?;
        (value, (hi - lo) / (2.0 * h) * alpha_tilde_prime)
    };
    Ok((alpha.clamp(1e-12, 1.0 - 1e-12), rate))
}

/// Discrete-side schedule induced by a Gaussian schedule through the
/// transformation operator: alpha(t) = T(alpha_tilde(t)), with the chain
/// rule applied for the rate.
#[derive(Debug, Clone)]
pub struct InducedSchedule {
    gaussian: NoiseSchedule,
    cache: TransformCache,
}

impl InducedSchedule {
    pub fn new(gaussian: NoiseSchedule, cache: TransformCache) -> Self {
        InducedSchedule { gaussian, cache }
    }
}

impl Schedule for InducedSchedule {
    fn eval(&self, t: f64) -> Result<AlphaPoint, Error> {
        let gp = self.gaussian.eval(t)?;
        let (alpha, alpha_prime) = induced_alpha(&self.cache, gp.alpha, gp.alpha_prime)?;
        Ok(AlphaPoint { alpha, alpha_prime })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::processes::{forward_marginal, PriorSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn quadrature_zero_signal_is_zero() {
        for k in [2usize, 8, 257] {
            let v = transform_quadrature(k, 0.0).unwrap();
            assert!(v.abs() < 1e-12, "K={k}: {v}");
        }
    }

    #[test]
    fn quadrature_full_signal_limit() {
        let v = transform_quadrature(8, 0.999_999).unwrap();
        assert!(v > 0.999_99, "{v}");
    }

    #[test]
    fn quadrature_matches_k2_closed_form() {
        for i in 0..20 {
            let a = i as f64 / 20.0;
            let got = transform_quadrature(2, a).unwrap();
            let want = transform_k2_analytic(a);
            assert!((got - want).abs() < 1e-10, "a={a}: {got} vs {want}");
        }
    }

    #[test]
    fn cache_m0_is_one_over_k() {
        for k in [2usize, 8, 256] {
            let cache = TransformCache::build(k, 8).unwrap();
            assert!(
                (cache.moments()[0] - 1.0 / k as f64).abs() < 1e-10,
                "K={k}: {}",
                cache.moments()[0]
            );
        }
    }

    #[test]
    fn shifted_moments_match_by_definition() {
        let cache = TransformCache::build(8, 12).unwrap();
        // I_n is the moment of order n+1, computed by its own quadrature.
        for n in 0..11 {
            let a = cache.shifted_moments()[n];
            let b = cache.moments()[n + 1];
            assert!((a - b).abs() < 1e-12 * a.abs().max(1.0), "n={n}: {a} vs {b}");
        }
    }

    #[test]
    fn series_matches_quadrature_on_grid() {
        let cache = TransformCache::build(8, DEFAULT_N_TERMS).unwrap();
        for i in 0..=20 {
            let a = 0.95 * i as f64 / 20.0;
            let s = cache.transform_series(a).unwrap();
            let q = transform_quadrature(8, a).unwrap();
            assert!((s - q).abs() < 1e-8, "a={a}: series {s} vs quad {q}");
        }
    }

    #[test]
    fn series_zero_signal_is_zero() {
        let cache = TransformCache::build(16, 32).unwrap();
        assert!(cache.transform_series(0.0).unwrap().abs() < 1e-12);
    }

    #[test]
    fn series_reports_ceiling_when_truncation_fails() {
        // A deliberately short series has a low usable ceiling; evaluations
        // beyond it surface the measured value instead of a wrong number.
        let cache = TransformCache::build(8, 16).unwrap();
        let ceiling = cache.alpha_tilde_ceiling();
        assert!(ceiling > 0.0 && ceiling < 1.0);
        assert!(cache.transform_series(ceiling * 0.99).is_ok());
        let err = cache.transform_series((ceiling + 1.0) / 2.0).unwrap_err();
        match err {
            Error::SeriesNotConverged { ceiling: c, .. } => assert_eq!(c, ceiling),
            other => panic!("unexpected error {other}"),
        }
        // The full-length series keeps a high ceiling.
        let full = TransformCache::build(8, DEFAULT_N_TERMS).unwrap();
        assert!(full.alpha_tilde_ceiling() > 0.9);
    }

    #[test]
    fn series_monotone_in_signal_level() {
        let cache = TransformCache::build(32, DEFAULT_N_TERMS).unwrap();
        let mut prev = -1.0;
        for i in 0..1000 {
            let a = 0.9 * i as f64 / 999.0;
            let v = cache.transform_series(a).unwrap();
            assert!(v >= prev - 1e-13, "a={a}");
            prev = v;
        }
    }

    #[test]
    fn derivative_matches_finite_differences() {
        let cache = TransformCache::build(8, DEFAULT_N_TERMS).unwrap();
        let h = 1e-5;
        for i in 1..10 {
            let a = 0.85 * i as f64 / 10.0;
            let d = cache.transform_derivative(a, -1.0).unwrap();
            let fd = (cache.transform_series(a + h).unwrap()
                - cache.transform_series(a - h).unwrap())
                / (2.0 * h)
                * -1.0;
            assert!(
                (d - fd).abs() / fd.abs().max(1e-12) < 1e-5,
                "a={a}: {d} vs {fd}"
            );
        }
    }

    #[test]
    fn derivative_zero_rate_and_sign() {
        let cache = TransformCache::build(8, DEFAULT_N_TERMS).unwrap();
        assert_eq!(cache.transform_derivative(0.4, 0.0).unwrap(), 0.0);
        for i in 0..20 {
            let a = 0.9 * i as f64 / 19.0;
            let d = cache.transform_derivative(a, -0.7).unwrap();
            assert!(d <= 1e-15, "a={a}: {d}");
        }
    }

    #[test]
    fn polynomial_tracks_series_within_recorded_error() {
        let cache = TransformCache::build(64, DEFAULT_N_TERMS).unwrap();
        let bound = cache.poly_max_abs_error();
        assert!(bound > 0.0 && bound < 0.05, "fit bound {bound}");
        assert!(cache.transform_polynomial(0.0).abs() <= bound + 1e-12);
        let mid = cache.transform_polynomial(0.7);
        let series = cache.transform_series(0.7).unwrap();
        assert!((mid - series).abs() <= bound + 1e-12);
    }

    #[test]
    fn pushforward_matches_forward_marginal() {
        // Empirical argmax distribution of a~ e_o + s~ ε against the
        // discrete forward marginal at the transformed signal level.
        let k = 4usize;
        let o = 1usize;
        let cache = TransformCache::build(k, DEFAULT_N_TERMS).unwrap();
        let prior = PriorSpec::uniform(k).unwrap();
        let n = 200_000usize;
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        for &a in &[0.2f64, 0.5, 0.8] {
            let sigma = (1.0 - a * a).sqrt();
            let mut counts = vec![0u64; k];
            for _ in 0..n {
                let mut best = f64::NEG_INFINITY;
                let mut arg = 0;
                for c in 0..k {
                    let noise: f64 = rng.sample(StandardNormal);
                    let w = sigma * noise + if c == o { a } else { 0.0 };
                    if w > best {
                        best = w;
                        arg = c;
                    }
                }
                counts[arg] += 1;
            }
            let alpha = cache.transform_series(a).unwrap();
            let target = forward_marginal(&prior, o, alpha).unwrap();
            for c in 0..k {
                let p_hat = counts[c] as f64 / n as f64;
                let p = target.get(c);
                let se = (p * (1.0 - p) / n as f64).sqrt();
                assert!(
                    (p_hat - p).abs() <= 3.0 * se,
                    "a={a} c={c}: {p_hat} vs {p} (se {se})"
                );
            }
        }
    }

    #[test]
    fn sidecar_round_trip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.json");
        let cache = TransformCache::build(8, 16).unwrap();
        cache.save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let loaded = TransformCache::load(&path).unwrap();
        assert_eq!(loaded, cache);
        let re = serde_json::to_string(&loaded).unwrap();
        assert_eq!(re.as_bytes(), &bytes[..]);
        let (reused, flag) = TransformCache::load_or_build(&path, 8, 16).unwrap();
        assert!(flag);
        assert_eq!(reused, cache);
        assert_eq!(std::fs::read(&path).unwrap(), bytes);
    }

    #[test]
    fn load_rejects_mismatched_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.json");
        let cache = TransformCache::build(4, 8).unwrap();
        let mut doc: serde_json::Value =
            serde_json::from_str(&serde_json::to_string(&cache).unwrap()).unwrap();
        doc["format_version"] = serde_json::json!(99);
        std::fs::write(&path, serde_json::to_string(&doc).unwrap()).unwrap();
        assert!(matches!(
            TransformCache::load(&path),
            Err(Error::CacheFormat(_))
        ));
    }
}
