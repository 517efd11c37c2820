//! Sample-quality metrics on exactly enumerable supports: total variation
//! against the true distribution and pooled unigram entropy, both with
//! delta-method standard errors.

use crate::error::Error;
use std::collections::HashMap;

/// Total variation between an empirical sample of sequences and an exactly
/// enumerated distribution, together with a delta-method standard error.
/// Refuses supports the enumeration does not cover.
pub fn tv_distance_to_enumerated(
    samples: &[Vec<usize>],
    enumerated: &[(Vec<usize>, f64)],
) -> Result<(f64, f64), Error> {
    if samples.is_empty() {
        return Err(Error::arg("no samples"));
    }
    let n = samples.len() as f64;
    let mut counts: HashMap<&[usize], u64> = HashMap::new();
    for s in samples {
        *counts.entry(s.as_slice()).or_default() += 1;
    }
    let mut seen = 0u64;
    let mut tv = 0.0;
    // Signs of (p_hat - p) per cell, for the variance of the signed sum.
    let mut signed_mass = 0.0;
    for (seq, p) in enumerated {
        let c = counts.get(seq.as_slice()).copied().unwrap_or(0);
        seen += c;
        let p_hat = c as f64 / n;
        tv += (p_hat - p).abs();
        signed_mass += if p_hat >= *p { *p } else { -*p };
    }
    if seen != samples.len() as u64 {
        return Err(Error::arg(
            "samples contain sequences outside the enumerated support",
        ));
    }
    tv *= 0.5;
    // TV = 0.5 Σ s_c (p_hat_c - p_c) with s_c fixed at the observed signs;
    // Var(Σ s_c p_hat_c) = (1 - (Σ s_c p_c)²)/n for a multinomial sample.
    let var = (1.0 - signed_mass * signed_mass).max(0.0) / n;
    Ok((tv, 0.5 * var.sqrt()))
}

/// Entropy (nats) of the pooled token histogram across all sequences and
/// positions, with a delta-method standard error.
pub fn pooled_unigram_entropy(samples: &[Vec<usize>], vocab_size: usize) -> (f64, f64) {
    let mut counts = vec![0u64; vocab_size];
    let mut n = 0u64;
    for seq in samples {
        for &c in seq {
            counts[c] += 1;
            n += 1;
        }
    }
    let nf = n as f64;
    let mut entropy = 0.0;
    let mut second = 0.0;
    for &c in &counts {
        if c == 0 {
            continue;
        }
        let p = c as f64 / nf;
        entropy -= p * p.ln();
        second += p * p.ln() * p.ln();
    }
    let var = (second - entropy * entropy).max(0.0) / nf;
    (entropy, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tv_zero_for_exact_match() {
        let enumerated = vec![(vec![0], 0.5), (vec![1], 0.5)];
        let samples: Vec<Vec<usize>> = (0..100).map(|i| vec![i % 2]).collect();
        let (tv, se) = tv_distance_to_enumerated(&samples, &enumerated).unwrap();
        assert!(tv < 1e-12);
        assert!(se >= 0.0 && se.is_finite());
    }

    #[test]
    fn tv_detects_skew() {
        let enumerated = vec![(vec![0], 0.5), (vec![1], 0.5)];
        let samples: Vec<Vec<usize>> = (0..100).map(|_| vec![0]).collect();
        let (tv, _) = tv_distance_to_enumerated(&samples, &enumerated).unwrap();
        assert!((tv - 0.5).abs() < 1e-12);
    }

    #[test]
    fn tv_rejects_foreign_sequences() {
        let enumerated = vec![(vec![0], 1.0)];
        let samples = vec![vec![1]];
        assert!(tv_distance_to_enumerated(&samples, &enumerated).is_err());
    }

    #[test]
    fn entropy_of_uniform_tokens() {
        let samples: Vec<Vec<usize>> = (0..4000).map(|i| vec![i % 4]).collect();
        let (h, _) = pooled_unigram_entropy(&samples, 4);
        assert!((h - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn entropy_of_constant_tokens_is_zero() {
        let samples: Vec<Vec<usize>> = (0..100).map(|_| vec![2, 2]).collect();
        let (h, se) = pooled_unigram_entropy(&samples, 4);
        assert_eq!(h, 0.0);
        assert_eq!(se, 0.0);
    }
}
