//! Memory-efficient sparse-softmax curriculum: simulate only the k largest
//! entries of the K-dimensional Gaussian latent, assign their indices, and
//! approximate the tempered-softmax weights and normalizer in closed form.
//!
//! The hot path allocates O(k) scratch per token and never touches a
//! K-sized buffer; the dense reference path exists for verification and
//! benchmarks only.

use crate::error::Error;
use crate::math;
use rand::Rng;
use rand_distr::StandardNormal;

/// Parameters of one curriculum draw: vocabulary size, top-k count, softmax
/// temperature, and the Gaussian signal/noise split at the sampled time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurriculumParams {
    pub vocab_size: usize,
    pub top_k: usize,
    pub tau: f64,
    pub alpha_tilde: f64,
    pub sigma_tilde: f64,
}

impl CurriculumParams {
    /// `sigma_tilde` is derived as sqrt(1 - alpha_tilde²), so the variance
    /// split invariant holds by construction. `top_k = vocab_size` selects
    /// the exact no-truncation path.
    pub fn new(
        vocab_size: usize,
        top_k: usize,
        tau: f64,
        alpha_tilde: f64,
    ) -> Result<Self, Error> {
        if vocab_size < 2 {
            return Err(Error::arg("vocabulary size must be at least 2"));
        }
        if top_k < 1 || top_k > vocab_size {
            return Err(Error::arg(format!(
                "top_k={top_k} outside [1, {vocab_size}]"
            )));
        }
        if !(tau > 0.0) {
            return Err(Error::arg("temperature must be positive"));
        }
        if !(0.0..1.0).contains(&alpha_tilde) {
            return Err(Error::arg(format!(
                "alpha_tilde={alpha_tilde} outside [0, 1)"
            )));
        }
        let sigma_tilde = (1.0 - alpha_tilde * alpha_tilde).sqrt();
        Ok(CurriculumParams {
            vocab_size,
            top_k,
            tau,
            alpha_tilde,
            sigma_tilde,
        })
    }
}

/// Which normalizer estimate the sparse draw uses for the tail.
///
/// * `PooledTail`: in the clean-token-inserted case the dropped smallest
///   simulated value is pooled into the `(K - k) μ` tail with cutoff at the
///   smallest retained zero-mean value.
/// * `ExplicitTail`: every simulated value (including the dropped one)
///   enters exactly; only the `K - k - 1` never-simulated entries go
///   through μ with cutoff at the smallest simulated zero-mean value. With
///   `k = K - 1` this makes the normalizer an exact sum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NormalizerForm {
    #[default]
    PooledTail,
    ExplicitTail,
}

/// Top-k slice of one simulated latent vector.
#[derive(Debug, Clone)]
pub struct TopKDraw {
    /// k values sorted descending.
    pub values: Vec<f64>,
    /// Matching distinct indices.
    pub indices: Vec<usize>,
    /// True iff the clean token made it into the top-k.
    pub delta: bool,
    /// The clean-token coordinate draw, N(alpha_tilde, sigma_tilde²).
    pub special_value: f64,
    /// ln of the estimated softmax normalizer.
    pub log_normalizer: f64,
    /// exp(values_i / tau) / normalizer.
    pub weights: Vec<f64>,
}

impl TopKDraw {
    /// Weight sum; strictly below one whenever unsampled mass remains.
    pub fn weight_sum(&self) -> f64 {
        self.weights.iter().sum()
    }
}

/// The k largest of `m` i.i.d. N(0, sigma²) draws, descending.
///
/// Uniform order statistics are generated recursively in log space —
/// the running log-maximum accumulates ln(U_l)/l — and mapped through the
/// inverse normal CDF. Only O(k) random variables are consumed.
pub fn sample_top_order_stats(
    m: usize,
    sigma: f64,
    k: usize,
    rng: &mut impl Rng,
) -> Result<Vec<f64>, Error> {
    if k < 1 || k > m {
        return Err(Error::arg(format!("k={k} outside [1, m={m}]")));
    }
    if !(sigma > 0.0) {
        return Err(Error::arg("sigma must be positive"));
    }
    let mut out = Vec::with_capacity(k);
    let mut log_v = 0.0f64;
    for j in 0..k {
        let remaining = (m - j) as f64;
        // (0, 1] so the log never hits -inf.
        let u: f64 = 1.0 - rng.random::<f64>();
        log_v += u.ln() / remaining;
        let x = math::norm_quantile_from_log(log_v);
        if !x.is_finite() {
            return Err(Error::OrderStatUnderflow);
        }
        out.push(x * sigma);
    }
    Ok(out)
}

/// Uniformly distributed k-subset of {0, .., n-1} by Floyd's algorithm,
/// in the order the algorithm produces it. O(k) draws, no shuffling.
pub fn floyd_sample(n: usize, k: usize, rng: &mut impl Rng) -> Result<Vec<usize>, Error> {
    if k < 1 || k > n {
        return Err(Error::arg(format!("k={k} outside [1, n={n}]")));
    }
    let mut chosen: Vec<usize> = Vec::with_capacity(k);
    for t in 0..k {
        let upper = n - k + t;
        let j = rng.random_range(0..=upper);
        if chosen.contains(&j) {
            chosen.push(upper);
        } else {
            chosen.push(j);
        }
    }
    Ok(chosen)
}

/// ln E[exp(X/tau) | X < cutoff] for X ~ N(0, sigma²), in closed form:
/// sigma²/(2 tau²) - ln Φ(cutoff/sigma) + ln Φ((cutoff - sigma²/tau)/sigma).
///
/// Returned in log space; the linear value overflows for any realistic
/// temperature. Never returns a non-finite value for finite inputs.
pub fn log_conditional_exp_mean(cutoff: f64, sigma: f64, tau: f64) -> Result<f64, Error> {
    if !(sigma > 0.0) || !(tau > 0.0) {
        return Err(Error::arg("sigma and tau must be positive"));
    }
    if cutoff.is_nan() {
        return Err(Error::arg("cutoff is NaN"));
    }
    let s2 = sigma * sigma;
    let log_mu = s2 / (2.0 * tau * tau) - math::log_norm_cdf(cutoff / sigma)
        + math::log_norm_cdf((cutoff - s2 / tau) / sigma);
    if log_mu.is_nan() {
        return Err(Error::NonFiniteLoss {
            term: "conditional exponential mean",
        });
    }
    Ok(log_mu)
}

/// One sparse curriculum draw: top-k values, their indices, the clean-token
/// flag, and the estimated normalizer, all without materializing the
/// K-dimensional latent. Uses the pooled-tail normalizer.
pub fn draw_sparse_softmax(
    params: &CurriculumParams,
    clean_index: usize,
    rng: &mut impl Rng,
) -> Result<TopKDraw, Error> {
    draw_sparse_softmax_with(params, clean_index, rng, NormalizerForm::PooledTail)
}

/// As [`draw_sparse_softmax`] with an explicit normalizer form.
pub fn draw_sparse_softmax_with(
    params: &CurriculumParams,
    clean_index: usize,
    rng: &mut impl Rng,
    form: NormalizerForm,
) -> Result<TopKDraw, Error> {
    let k_vocab = params.vocab_size;
    if clean_index >= k_vocab {
        return Err(Error::IndexOutOfRange {
            index: clean_index,
            size: k_vocab,
        });
    }
    let k = params.top_k;
    let tau = params.tau;
    let sigma = params.sigma_tilde;
    if k == k_vocab {
        return dense_equivalent_draw(params, clean_index, rng);
    }

    let zero_mean = sample_top_order_stats(k_vocab - 1, sigma, k, rng)?;
    let noise: f64 = rng.sample(StandardNormal);
    let special = params.alpha_tilde + sigma * noise;

    // A tie between the clean-token draw and the smallest simulated value is
    // a probability-zero event; it resolves to the not-inserted case.
    if special > zero_mean[k - 1] {
        // Clean token enters the top-k at rank r+1; the smallest simulated
        // zero-mean value is dropped from the retained set.
        let r = zero_mean.iter().take_while(|v| **v > special).count();
        let mut values = Vec::with_capacity(k);
        values.extend_from_slice(&zero_mean[..r]);
        values.push(special);
        values.extend_from_slice(&zero_mean[r..k - 1]);

        let mut indices = Vec::with_capacity(k);
        if k > 1 {
            let others = floyd_sample(k_vocab - 1, k - 1, rng)?;
            for (pos, &raw) in others.iter().enumerate() {
                if pos == r {
                    indices.push(clean_index);
                }
                indices.push(skip_index(raw, clean_index));
            }
        }
        if indices.len() < k {
            indices.push(clean_index);
        }

        let mut log_terms: Vec<f64> = values.iter().map(|v| v / tau).collect();
        match form {
            NormalizerForm::PooledTail => {
                // Tail cutoff at the smallest retained zero-mean value; the
                // dropped value is pooled into the K - k mean terms.
                let cutoff = if k >= 2 { zero_mean[k - 2] } else { zero_mean[0] };
                let log_mu = log_conditional_exp_mean(cutoff, sigma, tau)?;
                log_terms.push(((k_vocab - k) as f64).ln() + log_mu);
            }
            NormalizerForm::ExplicitTail => {
                let dropped = zero_mean[k - 1];
                log_terms.push(dropped / tau);
                if k_vocab - k - 1 > 0 {
                    let log_mu = log_conditional_exp_mean(dropped, sigma, tau)?;
                    log_terms.push(((k_vocab - k - 1) as f64).ln() + log_mu);
                }
            }
        }
        let log_z = math::log_sum_exp(&log_terms);
        finish_draw(values, indices, true, special, log_z, tau)
    } else {
        // Clean token missed the top-k: its draw is still known exactly and
        // enters the normalizer explicitly; the K - k - 1 never-simulated
        // entries contribute their conditional mean below the k-th value.
        let values = zero_mean;
        let raw = floyd_sample(k_vocab - 1, k, rng)?;
        let indices: Vec<usize> = raw.iter().map(|&j| skip_index(j, clean_index)).collect();

        let mut log_terms: Vec<f64> = values.iter().map(|v| v / tau).collect();
        log_terms.push(special / tau);
        if k_vocab - k - 1 > 0 {
            let log_mu = log_conditional_exp_mean(values[k - 1], sigma, tau)?;
            log_terms.push(((k_vocab - k - 1) as f64).ln() + log_mu);
        }
        let log_z = math::log_sum_exp(&log_terms);
        finish_draw(values, indices, false, special, log_z, tau)
    }
}

/// Map an index drawn from {0, .., K-2} into {0, .., K-1} \ {excluded}.
fn skip_index(j: usize, excluded: usize) -> usize {
    if j >= excluded {
        j + 1
    } else {
        j
    }
}

/// Exact draw for top_k = K: all coordinates are simulated through the
/// order-statistic path and the normalizer is the exact sum.
fn dense_equivalent_draw(
    params: &CurriculumParams,
    clean_index: usize,
    rng: &mut impl Rng,
) -> Result<TopKDraw, Error> {
    let k_vocab = params.vocab_size;
    let sigma = params.sigma_tilde;
    let zero_mean = sample_top_order_stats(k_vocab - 1, sigma, k_vocab - 1, rng)?;
    let noise: f64 = rng.sample(StandardNormal);
    let special = params.alpha_tilde + sigma * noise;
    let r = zero_mean.iter().take_while(|v| **v > special).count();
    let mut values = Vec::with_capacity(k_vocab);
    values.extend_from_slice(&zero_mean[..r]);
    values.push(special);
    values.extend_from_slice(&zero_mean[r..]);

    let others = floyd_sample(k_vocab - 1, k_vocab - 1, rng)?;
    let mut indices = Vec::with_capacity(k_vocab);
    for (pos, &raw) in others.iter().enumerate() {
        if pos == r {
            indices.push(clean_index);
        }
        indices.push(skip_index(raw, clean_index));
    }
    if indices.len() < k_vocab {
        indices.push(clean_index);
    }

    let log_terms: Vec<f64> = values.iter().map(|v| v / params.tau).collect();
    let log_z = math::log_sum_exp(&log_terms);
    finish_draw(values, indices, true, special, log_z, params.tau)
}

fn finish_draw(
    values: Vec<f64>,
    indices: Vec<usize>,
    delta: bool,
    special_value: f64,
    log_normalizer: f64,
    tau: f64,
) -> Result<TopKDraw, Error> {
    if !log_normalizer.is_finite() {
        return Err(Error::NonFiniteLoss {
            term: "softmax normalizer",
        });
    }
    let weights = values
        .iter()
        .map(|v| (v / tau - log_normalizer).exp())
        .collect();
    Ok(TopKDraw {
        values,
        indices,
        delta,
        special_value,
        log_normalizer,
        weights,
    })
}

/// Row-major embedding table.
#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    rows: usize,
    dim: usize,
    data: Vec<f64>,
}

impl EmbeddingTable {
    pub fn new(rows: usize, dim: usize, data: Vec<f64>) -> Result<Self, Error> {
        if data.len() != rows * dim {
            return Err(Error::arg(format!(
                "embedding table data length {} != {rows} x {dim}",
                data.len()
            )));
        }
        Ok(EmbeddingTable { rows, dim, data })
    }

    /// K x K identity table; with it the embedded vector is the weight
    /// vector itself, padded with zeros outside the selected indices.
    pub fn identity(k: usize) -> Self {
        let mut data = vec![0.0; k * k];
        for i in 0..k {
            data[i * k + i] = 1.0;
        }
        EmbeddingTable {
            rows: k,
            dim: k,
            data,
        }
    }

    pub fn random(rows: usize, dim: usize, rng: &mut impl Rng) -> Self {
        let data = (0..rows * dim)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        EmbeddingTable { rows, dim, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

/// Weighted sum of the selected embedding rows.
pub fn curriculum_embed(draw: &TopKDraw, table: &EmbeddingTable) -> Result<Vec<f64>, Error> {
    let mut out = vec![0.0; table.dim()];
    for (&idx, &w) in draw.indices.iter().zip(&draw.weights) {
        if idx >= table.rows() {
            return Err(Error::IndexOutOfRange {
                index: idx,
                size: table.rows(),
            });
        }
        for (o, &e) in out.iter_mut().zip(table.row(idx)) {
            *o += w * e;
        }
    }
    Ok(out)
}

/// Dense reference: materialize the full latent, take the exact tempered
/// softmax, and keep the top-k (weights, indices, values). Used by tests
/// and the benchmark harness as the ground-truth pipeline.
#[derive(Debug, Clone)]
pub struct DenseReferenceDraw {
    pub values: Vec<f64>,
    pub indices: Vec<usize>,
    pub delta: bool,
    pub log_normalizer: f64,
    pub weights: Vec<f64>,
}

pub fn dense_reference_draw(
    params: &CurriculumParams,
    clean_index: usize,
    rng: &mut impl Rng,
) -> Result<DenseReferenceDraw, Error> {
    let k_vocab = params.vocab_size;
    if clean_index >= k_vocab {
        return Err(Error::IndexOutOfRange {
            index: clean_index,
            size: k_vocab,
        });
    }
    let mut latent = vec![0.0f64; k_vocab];
    for (c, w) in latent.iter_mut().enumerate() {
        let noise: f64 = rng.sample(StandardNormal);
        *w = params.sigma_tilde * noise
            + if c == clean_index {
                params.alpha_tilde
            } else {
                0.0
            };
    }
    Ok(dense_reference_from_latent(params, clean_index, &latent))
}

/// Exact tempered softmax of an already-materialized latent.
pub fn dense_reference_from_latent(
    params: &CurriculumParams,
    clean_index: usize,
    latent: &[f64],
) -> DenseReferenceDraw {
    let k = params.top_k;
    let tau = params.tau;
    // Running top-k selection.
    let mut top: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
    for (i, &v) in latent.iter().enumerate() {
        if top.len() < k || v > top[k - 1].0 {
            let pos = top.partition_point(|&(tv, _)| tv > v);
            top.insert(pos, (v, i));
            if top.len() > k {
                top.pop();
            }
        }
    }
    let max = latent.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_z = max / tau
        + latent
            .iter()
            .map(|&v| ((v - max) / tau).exp())
            .sum::<f64>()
            .ln();
    let values: Vec<f64> = top.iter().map(|&(v, _)| v).collect();
    let indices: Vec<usize> = top.iter().map(|&(_, i)| i).collect();
    let weights: Vec<f64> = values.iter().map(|v| (v / tau - log_z).exp()).collect();
    DenseReferenceDraw {
        delta: indices.contains(&clean_index),
        values,
        indices,
        log_normalizer: log_z,
        weights,
    }
}
