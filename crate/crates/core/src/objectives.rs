//! Variational objectives: the per-token loss term, Monte-Carlo NELBO
//! estimators in discrete and Gaussian-latent form, the curriculum training
//! loss, and the finite-step superposition bound with exact enumeration.

use crate::curriculum::{
    curriculum_embed, dense_reference_from_latent, draw_sparse_softmax_with, CurriculumParams,
    EmbeddingTable, NormalizerForm,
};
use crate::duality::TransformCache;
use crate::error::Error;
use crate::processes::{
    forward_marginal, psi_posterior_model, psi_posterior_true, PriorKind, PriorSpec, Simplex,
};
use crate::rng::substream;
use crate::schedules::{KappaSchedule, Schedule, TimeGrid};
use crate::synthetic::sample_categorical;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

/// Floor applied to denoiser outputs before logs and divisions.
pub const DENOISER_FLOOR: f64 = 1e-12;

/// A denoising model: maps a latent sequence and a time to per-position
/// clean-token distributions. Implementations must be safe to call from
/// concurrent workers.
pub trait Denoiser: Send + Sync {
    fn denoise(&self, z: &[usize], t: f64) -> Vec<Simplex>;
}

impl<D: Denoiser + ?Sized> Denoiser for &D {
    fn denoise(&self, z: &[usize], t: f64) -> Vec<Simplex> {
        (**self).denoise(z, t)
    }
}

/// A denoising model whose inputs are per-position embedding vectors (a
/// superposition of token embeddings) instead of hard tokens.
pub trait EmbeddingDenoiser: Send + Sync {
    fn denoise_embedded(&self, inputs: &[Vec<f64>], t: f64) -> Vec<Simplex>;
}

/// Scalar context of the pointwise loss at one time step.
#[derive(Debug, Clone, Copy)]
pub struct LossContext {
    pub vocab_size: usize,
    pub alpha: f64,
    pub alpha_prime: f64,
    /// zeta = (1 - alpha) / (K alpha + 1 - alpha).
    pub zeta: f64,
}

impl LossContext {
    pub fn new(vocab_size: usize, alpha: f64, alpha_prime: f64) -> Result<Self, Error> {
        if vocab_size < 2 {
            return Err(Error::arg("vocabulary size must be at least 2"));
        }
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::arg(format!(
                "pointwise loss needs alpha in (0, 1), got {alpha}"
            )));
        }
        let k = vocab_size as f64;
        let zeta = (1.0 - alpha) / (k * alpha + 1.0 - alpha);
        Ok(LossContext {
            vocab_size,
            alpha,
            alpha_prime,
            zeta,
        })
    }
}

/// Per-token integrand of the uniform-state NELBO.
///
/// With `b = K alpha x_theta + (1 - alpha) 1`, `x̄_r` the matching entry for
/// the true token, `r` the observed latent index and `i` the clean index:
///
/// ```text
/// f = alpha'/(K alpha) [ K/x̄_r - K/b_r
///       - (zeta [z=x] + [z≠x]) Σ_j ln(b_r/b_j)
///       - K alpha/(1-alpha) ln(b_r/b_i) [z≠x]
///       - ((K-1) zeta [z=x] - 1/zeta [z≠x]) ln zeta ]
/// ```
///
/// The j-sum includes j = r (that term is zero). The value equals the
/// instantaneous KL rate between the exact and the model reverse step at
/// (z_t, t) — the bracket is non-positive and the alpha-prime prefactor
/// non-positive, so f is non-negative — and the NELBO is its expectation
/// over t and the forward latents.
pub fn pointwise_loss_f(
    ctx: &LossContext,
    z_t: usize,
    x: usize,
    x_theta: &Simplex,
) -> Result<f64, Error> {
    let k = ctx.vocab_size as f64;
    let alpha = ctx.alpha;
    if x_theta.len() != ctx.vocab_size {
        return Err(Error::arg("denoiser output length mismatch"));
    }
    let b = |c: usize| k * alpha * x_theta.get(c) + (1.0 - alpha);
    let b_r = b(z_t);
    let same = z_t == x;
    let xbar_r = if same { k * alpha + (1.0 - alpha) } else { 1.0 - alpha };

    let ln_b_r = b_r.ln();
    let mut sum_log = 0.0;
    for j in 0..ctx.vocab_size {
        sum_log += ln_b_r - b(j).ln();
    }
    let weight_z = if same { ctx.zeta } else { 1.0 };
    let mut bracket = k / xbar_r - k / b_r - weight_z * sum_log;
    if !same {
        bracket -= k * (alpha / (1.0 - alpha)) * (ln_b_r - b(x).ln());
    }
    let zeta_coeff = if same {
        (k - 1.0) * ctx.zeta
    } else {
        -1.0 / ctx.zeta
    };
    bracket -= zeta_coeff * ctx.zeta.ln();

    let f = ctx.alpha_prime / (k * alpha) * bracket;
    if !f.is_finite() {
        let term = if !bracket.is_finite() {
            "loss bracket"
        } else {
            "time-derivative prefactor"
        };
        return Err(Error::NonFiniteLoss { term });
    }
    Ok(f)
}

/// A Monte-Carlo estimate with its standard error.
#[derive(Debug, Clone, Copy)]
pub struct Estimate {
    pub value: f64,
    pub std_error: f64,
    pub n_samples: usize,
}

impl Estimate {
    /// True when the two estimates agree within `k_sigma` combined standard
    /// errors.
    pub fn agrees_with(&self, other: &Estimate, k_sigma: f64) -> bool {
        let combined = (self.std_error.powi(2) + other.std_error.powi(2)).sqrt();
        (self.value - other.value).abs() <= k_sigma * combined
    }
}

fn floor_outputs(mut outputs: Vec<Simplex>) -> Vec<Simplex> {
    for s in outputs.iter_mut() {
        *s = s.floor_and_renormalize(DENOISER_FLOOR);
    }
    outputs
}

/// Mean/SE over per-pair values, with a deterministic pairwise reduction.
fn reduce_pairs(pair_values: Vec<f64>) -> Estimate {
    let n = pair_values.len();
    let mean = crate::rng::tree_sum(&pair_values) / n as f64;
    let sq: Vec<f64> = pair_values.iter().map(|v| (v - mean) * (v - mean)).collect();
    let var = crate::rng::tree_sum(&sq) / (n as f64 - 1.0);
    Estimate {
        value: mean,
        std_error: (var / n as f64).sqrt(),
        n_samples: 2 * n,
    }
}

fn check_n_mc(n_mc: usize) -> Result<usize, Error> {
    if n_mc < 4 {
        return Err(Error::arg("need at least 4 Monte-Carlo samples"));
    }
    Ok(n_mc / 2)
}

/// Monte-Carlo NELBO with latents drawn from the discrete forward process.
///
/// Time is sampled with a stratified antithetic scheme: pair p covers the
/// stratum [p/P, (p+1)/P) at points (p+u)/P and (p+1-u)/P, which cuts the
/// estimator variance and gives an honest per-pair standard error.
pub fn nelbo_discrete(
    x: &[usize],
    denoiser: &dyn Denoiser,
    prior: &PriorSpec,
    schedule: &dyn Schedule,
    n_mc: usize,
    seed: u64,
) -> Result<Estimate, Error> {
    if prior.kind != PriorKind::Uniform {
        return Err(Error::arg("the NELBO estimators require the uniform prior"));
    }
    let pairs = check_n_mc(n_mc)?;
    let values = (0..pairs)
        .into_par_iter()
        .map(|p| -> Result<f64, Error> {
            let mut rng = substream(seed, p as u64);
            let u: f64 = rng.random();
            let t_a = (p as f64 + u) / pairs as f64;
            let t_b = (p as f64 + 1.0 - u) / pairs as f64;
            let ya = discrete_sample_loss(x, denoiser, prior, schedule, t_a, &mut rng)?;
            let yb = discrete_sample_loss(x, denoiser, prior, schedule, t_b, &mut rng)?;
            Ok(0.5 * (ya + yb))
        })
        .collect::<Result<Vec<_>, Error>>()?;
    Ok(reduce_pairs(values))
}

fn discrete_sample_loss(
    x: &[usize],
    denoiser: &dyn Denoiser,
    prior: &PriorSpec,
    schedule: &dyn Schedule,
    t: f64,
    rng: &mut impl Rng,
) -> Result<f64, Error> {
    let point = schedule.eval(t)?;
    let ctx = LossContext::new(prior.vocab_size, point.alpha, point.alpha_prime)?;
    let z: Vec<usize> = x
        .iter()
        .map(|&xi| {
            let marg = forward_marginal(prior, xi, point.alpha)?;
            Ok(sample_categorical(marg.probs(), rng))
        })
        .collect::<Result<Vec<_>, Error>>()?;
    let outputs = floor_outputs(denoiser.denoise(&z, t));
    let mut total = 0.0;
    for (pos, &xi) in x.iter().enumerate() {
        total += pointwise_loss_f(&ctx, z[pos], xi, &outputs[pos])?;
    }
    Ok(total)
}

/// Draw one Gaussian latent row for token `x_i`; shared between the
/// Gaussian-latent estimator and the dense curriculum path so the two
/// consume randomness identically.
fn draw_latent(
    rng: &mut impl Rng,
    k: usize,
    x_i: usize,
    alpha_tilde: f64,
    sigma_tilde: f64,
    buf: &mut Vec<f64>,
) {
    buf.clear();
    for c in 0..k {
        let noise: f64 = rng.sample(StandardNormal);
        buf.push(sigma_tilde * noise + if c == x_i { alpha_tilde } else { 0.0 });
    }
}

fn argmax(xs: &[f64]) -> usize {
    xs.iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .unwrap()
}

/// Monte-Carlo NELBO with latents drawn from the Gaussian process and
/// mapped through argmax; the discrete signal level and its rate come from
/// the cached transformation operator.
pub fn nelbo_gaussian_latents(
    x: &[usize],
    denoiser: &dyn Denoiser,
    gaussian_schedule: &dyn Schedule,
    cache: &TransformCache,
    n_mc: usize,
    seed: u64,
) -> Result<Estimate, Error> {
    let pairs = check_n_mc(n_mc)?;
    let k = cache.k_vocab();
    let values = (0..pairs)
        .into_par_iter()
        .map(|p| -> Result<f64, Error> {
            let mut rng = substream(seed, p as u64);
            let u: f64 = rng.random();
            let mut buf = Vec::with_capacity(k);
            let mut total_pair = 0.0;
            for t in [
                (p as f64 + u) / pairs as f64,
                (p as f64 + 1.0 - u) / pairs as f64,
            ] {
                total_pair +=
                    gaussian_sample_loss(x, denoiser, gaussian_schedule, cache, t, &mut rng, &mut buf)?;
            }
            Ok(0.5 * total_pair)
        })
        .collect::<Result<Vec<_>, Error>>()?;
    Ok(reduce_pairs(values))
}

fn gaussian_sample_loss(
    x: &[usize],
    denoiser: &dyn Denoiser,
    gaussian_schedule: &dyn Schedule,
    cache: &TransformCache,
    t: f64,
    rng: &mut impl Rng,
    buf: &mut Vec<f64>,
) -> Result<f64, Error> {
    let k = cache.k_vocab();
    let point = gaussian_schedule.eval(t)?;
    let sigma_tilde = (1.0 - point.alpha * point.alpha).sqrt();
    let (alpha, alpha_prime) =
        crate::duality::induced_alpha(cache, point.alpha, point.alpha_prime)?;
    let ctx = LossContext::new(k, alpha, alpha_prime)?;
    let mut z = Vec::with_capacity(x.len());
    for &xi in x {
        draw_latent(rng, k, xi, point.alpha, sigma_tilde, buf);
        z.push(argmax(buf));
    }
    let outputs = floor_outputs(denoiser.denoise(&z, t));
    let mut total = 0.0;
    for (pos, &xi) in x.iter().enumerate() {
        total += pointwise_loss_f(&ctx, z[pos], xi, &outputs[pos])?;
    }
    Ok(total)
}

/// Settings for the curriculum training loss.
#[derive(Debug, Clone, Copy)]
pub struct CurriculumLossConfig {
    pub top_k: usize,
    pub tau: f64,
    /// Time window [beta, gamma] the loss samples from.
    pub beta: f64,
    pub gamma: f64,
    pub form: NormalizerForm,
}

/// Curriculum loss: the denoiser sees a tempered-softmax superposition of
/// token embeddings while the loss target still uses the hard argmax
/// latent. With `top_k = K` the latent is materialized densely and consumes
/// randomness exactly like [`nelbo_gaussian_latents`]; in the
/// zero-temperature limit the two coincide sample by sample.
pub fn curriculum_loss(
    x: &[usize],
    denoiser: &dyn EmbeddingDenoiser,
    gaussian_schedule: &dyn Schedule,
    cache: &TransformCache,
    embeddings: &EmbeddingTable,
    config: &CurriculumLossConfig,
    n_mc: usize,
    seed: u64,
) -> Result<Estimate, Error> {
    if !(0.0 <= config.beta && config.beta < config.gamma && config.gamma <= 1.0) {
        return Err(Error::arg(format!(
            "need 0 <= beta < gamma <= 1, got beta={}, gamma={}",
            config.beta, config.gamma
        )));
    }
    let pairs = check_n_mc(n_mc)?;
    let k = cache.k_vocab();
    if embeddings.rows() != k {
        return Err(Error::arg("embedding table row count must match vocabulary"));
    }
    let values = (0..pairs)
        .into_par_iter()
        .map(|p| -> Result<f64, Error> {
            let mut rng = substream(seed, p as u64);
            let u: f64 = rng.random();
            let mut buf = Vec::with_capacity(k);
            let span = config.gamma - config.beta;
            let mut total_pair = 0.0;
            for t in [
                config.beta + span * (p as f64 + u) / pairs as f64,
                config.beta + span * (p as f64 + 1.0 - u) / pairs as f64,
            ] {
                total_pair += curriculum_sample_loss(
                    x,
                    denoiser,
                    gaussian_schedule,
                    cache,
                    embeddings,
                    config,
                    t,
                    &mut rng,
                    &mut buf,
                )?;
            }
            Ok(0.5 * total_pair)
        })
        .collect::<Result<Vec<_>, Error>>()?;
    Ok(reduce_pairs(values))
}

#[allow(clippy::too_many_arguments)]
fn curriculum_sample_loss(
    x: &[usize],
    denoiser: &dyn EmbeddingDenoiser,
    gaussian_schedule: &dyn Schedule,
    cache: &TransformCache,
    embeddings: &EmbeddingTable,
    config: &CurriculumLossConfig,
    t: f64,
    rng: &mut impl Rng,
    buf: &mut Vec<f64>,
) -> Result<f64, Error> {
    let k = cache.k_vocab();
    let point = gaussian_schedule.eval(t)?;
    let params = CurriculumParams::new(k, config.top_k, config.tau, point.alpha)?;
    let (alpha, alpha_prime) =
        crate::duality::induced_alpha(cache, point.alpha, point.alpha_prime)?;
    let ctx = LossContext::new(k, alpha, alpha_prime)?;

    let mut z = Vec::with_capacity(x.len());
    let mut embeds = Vec::with_capacity(x.len());
    for &xi in x {
        if config.top_k == k {
            draw_latent(rng, k, xi, point.alpha, params.sigma_tilde, buf);
            let dense = dense_reference_from_latent(&params, xi, buf);
            z.push(dense.indices[0]);
            let mut e = vec![0.0; embeddings.dim()];
            for (&idx, &w) in dense.indices.iter().zip(&dense.weights) {
                if w < 1e-300 {
                    continue;
                }
                for (o, &v) in e.iter_mut().zip(embeddings.row(idx)) {
                    *o += w * v;
                }
            }
            embeds.push(e);
        } else {
            let draw = draw_sparse_softmax_with(&params, xi, rng, config.form)?;
            z.push(draw.indices[0]);
            embeds.push(curriculum_embed(&draw, embeddings)?);
        }
    }
    let outputs = floor_outputs(denoiser.denoise_embedded(&embeds, t));
    let mut total = 0.0;
    for (pos, &xi) in x.iter().enumerate() {
        total += pointwise_loss_f(&ctx, z[pos], xi, &outputs[pos])?;
    }
    Ok(total)
}

/// Adapter making a hard-token denoiser consume embedded inputs by taking
/// the per-position argmax coordinate. Requires the embedding dimension to
/// equal the vocabulary (e.g. the identity table).
pub struct ArgmaxEmbeddingAdapter<D> {
    pub inner: D,
}

impl<D: Denoiser> EmbeddingDenoiser for ArgmaxEmbeddingAdapter<D> {
    fn denoise_embedded(&self, inputs: &[Vec<f64>], t: f64) -> Vec<Simplex> {
        let z: Vec<usize> = inputs.iter().map(|row| argmax(row)).collect();
        self.inner.denoise(&z, t)
    }
}

/// Soft adapter: interprets each input row (vocabulary-dimensional, e.g.
/// produced with the identity embedding table) as weights over tokens and
/// returns the weight-mixed outputs of the inner denoiser, evaluated with
/// the other positions fixed at their argmax. Sensitive to the weight
/// approximation, unlike the argmax adapter.
pub struct SoftMixtureDenoiser<D> {
    pub inner: D,
    /// Mixture components below this weight are dropped.
    pub weight_floor: f64,
}

impl<D: Denoiser> EmbeddingDenoiser for SoftMixtureDenoiser<D> {
    fn denoise_embedded(&self, inputs: &[Vec<f64>], t: f64) -> Vec<Simplex> {
        let base: Vec<usize> = inputs.iter().map(|row| argmax(row)).collect();
        let k = inputs[0].len();
        inputs
            .iter()
            .enumerate()
            .map(|(pos, row)| {
                let mut acc = vec![0.0f64; k];
                let mut mass = 0.0;
                let mut z = base.clone();
                for (c, &w) in row.iter().enumerate() {
                    if w <= self.weight_floor {
                        continue;
                    }
                    z[pos] = c;
                    let out = self.inner.denoise(&z, t);
                    for (a, &p) in acc.iter_mut().zip(out[pos].probs()) {
                        *a += w * p;
                    }
                    mass += w;
                }
                if mass == 0.0 {
                    z[pos] = base[pos];
                    return self.inner.denoise(&z, t)[pos].clone();
                }
                Simplex::from_unnormalized(acc).expect("positive mixture")
            })
            .collect()
    }
}

/// Decomposed finite-step superposition bound.
#[derive(Debug, Clone, Copy)]
pub struct PsiNelboBound {
    pub total: f64,
    pub reconstruction: f64,
    /// KL between the variational and generative distributions at t = 1;
    /// identically zero because both are the prior.
    pub prior_kl: f64,
    pub kl_sum: f64,
}

/// Enumeration limit for the bound (vocabulary and step count).
pub const BOUND_MAX_VOCAB: usize = 8;
pub const BOUND_MAX_STEPS: usize = 8;

/// Exact finite-step NELBO bound for one token under the superposition
/// reverse chain: reconstruction + prior KL + per-step KL terms, evaluated
/// by exact enumeration over the latent state at every grid time.
pub fn psi_nelbo_bound(
    x: usize,
    prior: &PriorSpec,
    schedule: &dyn Schedule,
    kappa_schedule: &KappaSchedule,
    denoiser: &dyn Denoiser,
    t_steps: usize,
) -> Result<PsiNelboBound, Error> {
    check_bound_size(prior, t_steps)?;
    let grid = TimeGrid::uniform(t_steps)?;
    let times = grid.times();
    let k = prior.vocab_size;

    // Variational marginals follow the exact superposition chain.
    let mut marginal = prior.simplex().into_vec();

    // Prior term: both sides are the prior by construction.
    let pi = prior.simplex();
    let prior_kl: f64 = pi
        .probs()
        .iter()
        .map(|&p| if p > 0.0 { p * (p / p).ln() } else { 0.0 })
        .sum();

    let mut kl_sum = 0.0;
    for i in (1..times.len()).rev() {
        let t = times[i];
        let s = times[i - 1];
        let alpha_t = schedule.alpha(t)?;
        let alpha_s = schedule.alpha(s)?;
        let kappa = kappa_schedule.eval(t, alpha_s, alpha_t)?;
        let mut next = vec![0.0; k];
        for z_t in 0..k {
            if marginal[z_t] <= 0.0 {
                continue;
            }
            let truth = psi_posterior_true(prior, x, z_t, kappa, alpha_s, alpha_t)?;
            let x_theta = floor_outputs(denoiser.denoise(&[z_t], t)).remove(0);
            let model = psi_posterior_model(prior, &x_theta, z_t, kappa, alpha_s, alpha_t)?;
            let mut kl = 0.0;
            for c in 0..k {
                let p = truth.get(c);
                if p > 0.0 {
                    let q = model.get(c);
                    if q <= 0.0 {
                        return Err(Error::NonFiniteLoss {
                            term: "reverse-step KL",
                        });
                    }
                    kl += p * (p / q).ln();
                }
            }
            kl_sum += marginal[z_t] * kl;
            for (c, &p) in truth.probs().iter().enumerate() {
                next[c] += marginal[z_t] * p;
            }
        }
        marginal = next;
    }

    let mut reconstruction = 0.0;
    for (z_0, &p) in marginal.iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        let x_theta = floor_outputs(denoiser.denoise(&[z_0], 0.0)).remove(0);
        reconstruction += p * -(x_theta.get(x).ln());
    }

    Ok(PsiNelboBound {
        total: reconstruction + prior_kl + kl_sum,
        reconstruction,
        prior_kl,
        kl_sum,
    })
}

/// Exact negative log-likelihood of the generative chain the bound is
/// taken against: the model reverse chain is Markov, so its terminal
/// distribution follows from a forward pass over the grid.
pub fn psi_exact_neg_log_likelihood(
    x: usize,
    prior: &PriorSpec,
    schedule: &dyn Schedule,
    kappa_schedule: &KappaSchedule,
    denoiser: &dyn Denoiser,
    t_steps: usize,
) -> Result<f64, Error> {
    check_bound_size(prior, t_steps)?;
    let grid = TimeGrid::uniform(t_steps)?;
    let times = grid.times();
    let k = prior.vocab_size;
    let mut marginal = prior.simplex().into_vec();
    for i in (1..times.len()).rev() {
        let t = times[i];
        let s = times[i - 1];
        let alpha_t = schedule.alpha(t)?;
        let alpha_s = schedule.alpha(s)?;
        let kappa = kappa_schedule.eval(t, alpha_s, alpha_t)?;
        let mut next = vec![0.0; k];
        for z_t in 0..k {
            if marginal[z_t] <= 0.0 {
                continue;
            }
            let x_theta = floor_outputs(denoiser.denoise(&[z_t], t)).remove(0);
            let model = psi_posterior_model(prior, &x_theta, z_t, kappa, alpha_s, alpha_t)?;
            for (c, &p) in model.probs().iter().enumerate() {
                next[c] += marginal[z_t] * p;
            }
        }
        marginal = next;
    }
    let mut p_x = 0.0;
    for (z_0, &p) in marginal.iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        let x_theta = floor_outputs(denoiser.denoise(&[z_0], 0.0)).remove(0);
        p_x += p * x_theta.get(x);
    }
    Ok(-p_x.ln())
}

fn check_bound_size(prior: &PriorSpec, t_steps: usize) -> Result<(), Error> {
    if prior.vocab_size > BOUND_MAX_VOCAB || t_steps > BOUND_MAX_STEPS {
        return Err(Error::SupportTooLarge {
            size: (prior.vocab_size as u64) << 32 | t_steps as u64,
            limit: (BOUND_MAX_VOCAB as u64) << 32 | BOUND_MAX_STEPS as u64,
        });
    }
    Ok(())
}

/// Small trainable context-free denoiser: a logit table indexed by a coarse
/// time bucket and the observed latent token. Trained by stochastic
/// gradient descent directly on the pointwise loss.
#[derive(Debug, Clone)]
pub struct TabularDenoiser {
    vocab_size: usize,
    time_buckets: usize,
    logits: Vec<f64>,
}

impl TabularDenoiser {
    pub fn new_uniform(vocab_size: usize, time_buckets: usize) -> Self {
        TabularDenoiser {
            vocab_size,
            time_buckets,
            logits: vec![0.0; vocab_size * vocab_size * time_buckets],
        }
    }

    fn bucket(&self, t: f64) -> usize {
        ((t * self.time_buckets as f64) as usize).min(self.time_buckets - 1)
    }

    fn row(&self, bucket: usize, z: usize) -> &[f64] {
        let start = (bucket * self.vocab_size + z) * self.vocab_size;
        &self.logits[start..start + self.vocab_size]
    }

    fn softmax_row(&self, bucket: usize, z: usize) -> Vec<f64> {
        let row = self.row(bucket, z);
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut out: Vec<f64> = row.iter().map(|&l| (l - mx).exp()).collect();
        let sum: f64 = out.iter().sum();
        for o in out.iter_mut() {
            *o /= sum;
        }
        out
    }

    /// One SGD pass of `steps` samples against a synthetic source under the
    /// uniform prior. Returns the final running loss average.
    pub fn train(
        &mut self,
        source: &crate::synthetic::SyntheticSource,
        prior: &PriorSpec,
        schedule: &dyn Schedule,
        steps: usize,
        learning_rate: f64,
        seed: u64,
    ) -> Result<f64, Error> {
        if prior.kind != PriorKind::Uniform {
            return Err(Error::arg("tabular training requires the uniform prior"));
        }
        let k = self.vocab_size;
        let kf = k as f64;
        let mut running = 0.0;
        let mut rng = substream(seed, 0);
        for step in 0..steps {
            let x_seq = source.sample(&mut rng);
            let t: f64 = (rng.random::<f64>()).clamp(1e-6, 1.0 - 1e-6);
            let point = schedule.eval(t)?;
            let ctx = LossContext::new(k, point.alpha, point.alpha_prime)?;
            let lr = learning_rate / (1.0 + step as f64 / steps as f64);
            for &x in &x_seq {
                let marg = forward_marginal(prior, x, point.alpha)?;
                let z = sample_categorical(marg.probs(), &mut rng);
                let bucket = self.bucket(t);
                let x_theta = self.softmax_row(bucket, z);
                let (loss, grad) = loss_and_logit_gradient(&ctx, z, x, &x_theta)?;
                running += loss;
                let start = (bucket * k + z) * k;
                for c in 0..k {
                    // Rare near-boundary samples carry huge loss weights;
                    // clip per-component so they cannot destroy the table.
                    self.logits[start + c] -= lr * grad[c].clamp(-1.0, 1.0);
                }
            }
        }
        Ok(running / (steps as f64 * source.length() as f64))
    }
}

impl Denoiser for TabularDenoiser {
    fn denoise(&self, z: &[usize], t: f64) -> Vec<Simplex> {
        let bucket = self.bucket(t);
        z.iter()
            .map(|&zi| Simplex::new(self.softmax_row(bucket, zi)).expect("softmax row"))
            .collect()
    }
}

/// Pointwise loss and its gradient with respect to the logits that produce
/// `x_theta` by softmax. The loss is `f = h * bracket` with
/// `h = alpha'/(K alpha)`; the bracket derivative is taken term by term and
/// pushed through the softmax Jacobian.
fn loss_and_logit_gradient(
    ctx: &LossContext,
    z: usize,
    x: usize,
    x_theta: &[f64],
) -> Result<(f64, Vec<f64>), Error> {
    let k = ctx.vocab_size;
    let kf = k as f64;
    let alpha = ctx.alpha;
    let loss = pointwise_loss_f(ctx, z, x, &Simplex::new(x_theta.to_vec())?)?;
    let b = |c: usize| kf * alpha * x_theta[c] + (1.0 - alpha);
    let b_r = b(z);
    let same = z == x;
    let w_z = if same { ctx.zeta } else { 1.0 };
    let d_big = if same { 0.0 } else { kf * alpha / (1.0 - alpha) };
    let h = ctx.alpha_prime / (kf * alpha);
    // dBracket/db_c, then dLoss/dx_theta_c = h * dBracket/db_c * K alpha.
    let mut g = vec![0.0f64; k];
    for (c, gc) in g.iter_mut().enumerate() {
        let mut db = 0.0;
        if c == z {
            db += kf / (b_r * b_r);
            db -= w_z * kf / b_r;
            db -= d_big / b_r;
        }
        db += w_z / b(c);
        if c == x {
            db += d_big / b(x);
        }
        *gc = h * db * kf * alpha;
    }
    let g_bar: f64 = g.iter().zip(x_theta).map(|(gc, xc)| gc * xc).sum();
    let grad = (0..k).map(|c| x_theta[c] * (g[c] - g_bar)).collect();
    Ok((loss, grad))
}
