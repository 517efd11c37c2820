//! Small exactly-known categorical sources and the exact Bayes-oracle
//! denoiser they induce; every sampler and bound test measures against
//! these.

use crate::error::Error;
use crate::objectives::Denoiser;
use crate::processes::{PriorSpec, Simplex};
use crate::schedules::Schedule;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

/// Enumeration guard: sources with more than 2^20 sequences refuse exact
/// operations rather than estimating silently.
pub const MAX_ENUMERABLE_STATES: u64 = 1 << 20;

/// An exactly known sequence distribution over K categories and L positions.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum SyntheticSource {
    IidCategorical {
        length: usize,
        probs: Vec<f64>,
    },
    FirstOrderMarkov {
        length: usize,
        initial: Vec<f64>,
        rows: Vec<Vec<f64>>,
    },
}

impl SyntheticSource {
    pub fn vocab_size(&self) -> usize {
        match self {
            SyntheticSource::IidCategorical { probs, .. } => probs.len(),
            SyntheticSource::FirstOrderMarkov { initial, .. } => initial.len(),
        }
    }

    pub fn length(&self) -> usize {
        match self {
            SyntheticSource::IidCategorical { length, .. } => *length,
            SyntheticSource::FirstOrderMarkov { length, .. } => *length,
        }
    }

    pub fn validate(&self) -> Result<(), Error> {
        let check_row = |row: &[f64]| -> Result<(), Error> {
            Simplex::new(row.to_vec()).map(|_| ())
        };
        match self {
            SyntheticSource::IidCategorical { length, probs } => {
                if *length == 0 {
                    return Err(Error::arg("length must be positive"));
                }
                check_row(probs)
            }
            SyntheticSource::FirstOrderMarkov {
                length,
                initial,
                rows,
            } => {
                if *length == 0 {
                    return Err(Error::arg("length must be positive"));
                }
                check_row(initial)?;
                if rows.len() != initial.len() {
                    return Err(Error::arg("transition matrix must be K x K"));
                }
                for row in rows {
                    if row.len() != initial.len() {
                        return Err(Error::arg("transition matrix must be K x K"));
                    }
                    check_row(row)?;
                }
                Ok(())
            }
        }
    }

    /// Exact probability of one sequence.
    pub fn sequence_probability(&self, seq: &[usize]) -> f64 {
        assert_eq!(seq.len(), self.length());
        match self {
            SyntheticSource::IidCategorical { probs, .. } => {
                seq.iter().map(|&c| probs[c]).product()
            }
            SyntheticSource::FirstOrderMarkov { initial, rows, .. } => {
                let mut p = initial[seq[0]];
                for w in seq.windows(2) {
                    p *= rows[w[0]][w[1]];
                }
                p
            }
        }
    }

    fn state_count(&self) -> u64 {
        (self.vocab_size() as u64).pow(self.length() as u32)
    }

    /// All sequences with their probabilities. The probabilities sum to one
    /// within 1e-12 for a valid source.
    pub fn enumerate_distribution(&self) -> Result<Vec<(Vec<usize>, f64)>, Error> {
        let states = self.state_count();
        if states > MAX_ENUMERABLE_STATES {
            return Err(Error::SupportTooLarge {
                size: states,
                limit: MAX_ENUMERABLE_STATES,
            });
        }
        let k = self.vocab_size();
        let l = self.length();
        let mut out = Vec::with_capacity(states as usize);
        let mut seq = vec![0usize; l];
        loop {
            out.push((seq.clone(), self.sequence_probability(&seq)));
            // Mixed-radix increment.
            let mut pos = l;
            loop {
                if pos == 0 {
                    return Ok(out);
                }
                pos -= 1;
                seq[pos] += 1;
                if seq[pos] < k {
                    break;
                }
                seq[pos] = 0;
            }
        }
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Vec<usize> {
        match self {
            SyntheticSource::IidCategorical { length, probs } => {
                (0..*length).map(|_| sample_categorical(probs, rng)).collect()
            }
            SyntheticSource::FirstOrderMarkov {
                length,
                initial,
                rows,
            } => {
                let mut seq = Vec::with_capacity(*length);
                let mut state = sample_categorical(initial, rng);
                seq.push(state);
                for _ in 1..*length {
                    state = sample_categorical(&rows[state], rng);
                    seq.push(state);
                }
                seq
            }
        }
    }

    /// Random i.i.d. source with Dirichlet-ish weights.
    pub fn random_iid(k: usize, length: usize, rng: &mut impl Rng) -> Self {
        let probs = random_simplex(k, rng);
        SyntheticSource::IidCategorical { length, probs }
    }

    pub fn random_markov(k: usize, length: usize, rng: &mut impl Rng) -> Self {
        SyntheticSource::FirstOrderMarkov {
            length,
            initial: random_simplex(k, rng),
            rows: (0..k).map(|_| random_simplex(k, rng)).collect(),
        }
    }

    /// Pinned non-symmetric fixtures for golden tests.
    pub fn fixture_iid_k4(length: usize) -> Self {
        SyntheticSource::IidCategorical {
            length,
            probs: vec![0.45, 0.25, 0.2, 0.1],
        }
    }

    pub fn fixture_iid_k2(length: usize) -> Self {
        SyntheticSource::IidCategorical {
            length,
            probs: vec![0.7, 0.3],
        }
    }

    pub fn fixture_markov_k3(length: usize) -> Self {
        SyntheticSource::FirstOrderMarkov {
            length,
            initial: vec![0.5, 0.3, 0.2],
            rows: vec![
                vec![0.6, 0.3, 0.1],
                vec![0.2, 0.5, 0.3],
                vec![0.25, 0.25, 0.5],
            ],
        }
    }

    /// Fixture over K categories whose last index carries no mass, for
    /// masked-prior runs where that index is the mask token.
    pub fn fixture_iid_k4_masked(length: usize) -> Self {
        SyntheticSource::IidCategorical {
            length,
            probs: vec![0.5, 0.3, 0.2, 0.0],
        }
    }
}

fn random_simplex(k: usize, rng: &mut impl Rng) -> Vec<f64> {
    // Exponential weights normalized; keeps every entry strictly positive.
    let raw: Vec<f64> = (0..k)
        .map(|_| -(1.0 - rng.random::<f64>()).ln() + 1e-3)
        .collect();
    let sum: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / sum).collect()
}

pub(crate) fn sample_categorical(probs: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Exact Bayes posterior denoiser for an enumerable source: conditions on
/// the full latent sequence by joint enumeration over the source support.
pub struct ExactBayesDenoiser {
    support: Vec<(Vec<usize>, f64)>,
    prior: PriorSpec,
    schedule: Box<dyn Schedule>,
    length: usize,
}

impl ExactBayesDenoiser {
    pub fn new(
        source: &SyntheticSource,
        prior: PriorSpec,
        schedule: Box<dyn Schedule>,
    ) -> Result<Self, Error> {
        source.validate()?;
        if source.vocab_size() != prior.vocab_size {
            return Err(Error::arg(format!(
                "source vocabulary {} != prior vocabulary {}",
                source.vocab_size(),
                prior.vocab_size
            )));
        }
        Ok(ExactBayesDenoiser {
            support: source.enumerate_distribution()?,
            prior,
            schedule,
            length: source.length(),
        })
    }

    fn corruption_prob(&self, z: usize, x: usize, alpha: f64) -> f64 {
        let pi = self.prior.simplex();
        (if z == x { alpha } else { 0.0 }) + (1.0 - alpha) * pi.get(z)
    }
}

impl Denoiser for ExactBayesDenoiser {
    fn denoise(&self, z: &[usize], t: f64) -> Vec<Simplex> {
        assert_eq!(z.len(), self.length);
        let alpha = self.schedule.alpha(t).expect("t inside [0, 1]");
        let k = self.prior.vocab_size;
        let mut acc = vec![vec![0.0f64; k]; self.length];
        let mut total = 0.0;
        for (x_seq, p) in &self.support {
            if *p == 0.0 {
                continue;
            }
            let mut w = *p;
            for (pos, (&z_pos, &x_pos)) in z.iter().zip(x_seq.iter()).enumerate() {
                let _ = pos;
                w *= self.corruption_prob(z_pos, x_pos, alpha);
                if w == 0.0 {
                    break;
                }
            }
            if w == 0.0 {
                continue;
            }
            total += w;
            for (pos, &x_pos) in x_seq.iter().enumerate() {
                acc[pos][x_pos] += w;
            }
        }
        assert!(total > 0.0, "latent sequence impossible under the source");
        acc.into_iter()
            .map(|row| Simplex::from_unnormalized(row).expect("positive total"))
            .collect()
    }
}

/// Cheaper per-position denoiser conditioning only on the local latent via
/// the source's position marginals. Approximate for correlated sources;
/// exact for i.i.d. ones.
pub struct FactoredBayesDenoiser {
    marginals: Vec<Vec<f64>>,
    prior: PriorSpec,
    schedule: Box<dyn Schedule>,
}

impl FactoredBayesDenoiser {
    pub fn new(
        source: &SyntheticSource,
        prior: PriorSpec,
        schedule: Box<dyn Schedule>,
    ) -> Result<Self, Error> {
        source.validate()?;
        let k = source.vocab_size();
        let l = source.length();
        let mut marginals = vec![vec![0.0f64; k]; l];
        match source {
            SyntheticSource::IidCategorical { probs, .. } => {
                for m in marginals.iter_mut() {
                    m.copy_from_slice(probs);
                }
            }
            SyntheticSource::FirstOrderMarkov { initial, rows, .. } => {
                let mut current = initial.clone();
                marginals[0].copy_from_slice(&current);
                for m in marginals.iter_mut().skip(1) {
                    let mut next = vec![0.0; k];
                    for (s, &p) in current.iter().enumerate() {
                        for (c, &q) in rows[s].iter().enumerate() {
                            next[c] += p * q;
                        }
                    }
                    m.copy_from_slice(&next);
                    current = next;
                }
            }
        }
        Ok(FactoredBayesDenoiser {
            marginals,
            prior,
            schedule,
        })
    }
}

impl Denoiser for FactoredBayesDenoiser {
    fn denoise(&self, z: &[usize], t: f64) -> Vec<Simplex> {
        let alpha = self.schedule.alpha(t).expect("t inside [0, 1]");
        let pi = self.prior.simplex();
        z.iter()
            .enumerate()
            .map(|(pos, &z_pos)| {
                let weights: Vec<f64> = self.marginals[pos]
                    .iter()
                    .enumerate()
                    .map(|(x, &px)| {
                        px * ((if z_pos == x { alpha } else { 0.0 })
                            + (1.0 - alpha) * pi.get(z_pos))
                    })
                    .collect();
                Simplex::from_unnormalized(weights).expect("positive marginals")
            })
            .collect()
    }
}

/// Denoiser returning the ground-truth token one-hots regardless of the
/// latent; the teacher-forced reference for marginal-preservation runs.
pub struct TeacherForcedDenoiser {
    pub x: Vec<usize>,
    pub vocab_size: usize,
}

impl Denoiser for TeacherForcedDenoiser {
    fn denoise(&self, z: &[usize], _t: f64) -> Vec<Simplex> {
        assert_eq!(z.len(), self.x.len());
        self.x
            .iter()
            .map(|&x| Simplex::one_hot(self.vocab_size, x))
            .collect()
    }
}

/// How [`CorruptedDenoiser`] distorts the wrapped outputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorruptionKind {
    /// Blend toward the uniform distribution (underconfidence).
    UniformMix,
    /// Blend toward a one-hot at the output argmax (overconfidence).
    Sharpen,
}

/// Wrap a denoiser and blend its output toward a distortion target with
/// weight `rho`, optionally only inside a time window: a controlled
/// corruption used to study error accumulation and loss ordering.
pub struct CorruptedDenoiser<D> {
    pub inner: D,
    pub rho: f64,
    pub kind: CorruptionKind,
    pub window: Option<(f64, f64)>,
}

impl<D: Denoiser> Denoiser for CorruptedDenoiser<D> {
    fn denoise(&self, z: &[usize], t: f64) -> Vec<Simplex> {
        let base = self.inner.denoise(z, t);
        let active = match self.window {
            Some((lo, hi)) => t >= lo && t <= hi,
            None => true,
        };
        if !active || self.rho == 0.0 {
            return base;
        }
        base.into_iter()
            .map(|s| {
                let k = s.len();
                let target = |c: usize| match self.kind {
                    CorruptionKind::UniformMix => 1.0 / k as f64,
                    CorruptionKind::Sharpen => {
                        if c == s.argmax() {
                            1.0
                        } else {
                            0.0
                        }
                    }
                };
                let mixed: Vec<f64> = s
                    .probs()
                    .iter()
                    .enumerate()
                    .map(|(c, &p)| (1.0 - self.rho) * p + self.rho * target(c))
                    .collect();
                Simplex::new(mixed).expect("mixture of simplices")
            })
            .collect()
    }
}

/// Precomputed denoiser outputs for every latent sequence at a fixed set of
/// grid times; turns repeated sampling runs over small supports into table
/// lookups. Falls back to the inner denoiser off-grid.
pub struct TabulatedDenoiser<D> {
    inner: D,
    vocab_size: usize,
    length: usize,
    tables: HashMap<u64, Vec<Vec<Simplex>>>,
}

impl<D: Denoiser> TabulatedDenoiser<D> {
    pub fn build(inner: D, vocab_size: usize, length: usize, times: &[f64]) -> Result<Self, Error> {
        let states = (vocab_size as u64).pow(length as u32);
        if states > MAX_ENUMERABLE_STATES {
            return Err(Error::SupportTooLarge {
                size: states,
                limit: MAX_ENUMERABLE_STATES,
            });
        }
        let mut tables = HashMap::new();
        for &t in times {
            let mut per_state = Vec::with_capacity(states as usize);
            let mut seq = vec![0usize; length];
            for _ in 0..states {
                per_state.push(inner.denoise(&seq, t));
                let mut pos = length;
                while pos > 0 {
                    pos -= 1;
                    seq[pos] += 1;
                    if seq[pos] < vocab_size {
                        break;
                    }
                    seq[pos] = 0;
                }
            }
            tables.insert(t.to_bits(), per_state);
        }
        Ok(TabulatedDenoiser {
            inner,
            vocab_size,
            length,
            tables,
        })
    }

    fn state_index(&self, z: &[usize]) -> usize {
        let mut idx = 0usize;
        for &c in z {
            idx = idx * self.vocab_size + c;
        }
        idx
    }
}

impl<D: Denoiser> Denoiser for TabulatedDenoiser<D> {
    fn denoise(&self, z: &[usize], t: f64) -> Vec<Simplex> {
        assert_eq!(z.len(), self.length);
        match self.tables.get(&t.to_bits()) {
            Some(per_state) => per_state[self.state_index(z)].clone(),
            None => self.inner.denoise(z, t),
        }
    }
}
