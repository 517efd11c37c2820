//! Forward marginals, exact reverse posteriors for masked and uniform
//! priors, and the superposition (psi) posterior family, including the
//! remasking (ReMDM-style) posterior used for equivalence checks.
//!
//! All posteriors work in linear probability space and renormalize at the
//! end to absorb rounding. A clean token may be given either as a hard
//! index or as a denoiser simplex; the hard case is a degenerate simplex so
//! one code path serves the exact and the model-approximate forms.

use crate::error::Error;
use crate::schedules::{KappaSchedule, Schedule};
use serde::{Deserialize, Serialize};

/// Validation tolerance on simplex normalization.
pub const SIMPLEX_SUM_TOL: f64 = 1e-9;

/// A point of the probability simplex over the vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct Simplex(Vec<f64>);

impl Simplex {
    pub fn new(probs: Vec<f64>) -> Result<Self, Error> {
        if probs.is_empty() {
            return Err(Error::InvalidSimplex("empty weight vector".into()));
        }
        let mut sum = 0.0;
        for (i, &p) in probs.iter().enumerate() {
            if !(p >= 0.0) || !p.is_finite() {
                return Err(Error::InvalidSimplex(format!("entry {i} is {p}")));
            }
            sum += p;
        }
        if (sum - 1.0).abs() > SIMPLEX_SUM_TOL {
            return Err(Error::InvalidSimplex(format!("sum {sum} not within 1e-9 of 1")));
        }
        Ok(Simplex(probs))
    }

    /// Normalize non-negative weights. Fails on a zero or non-finite total.
    pub fn from_unnormalized(weights: Vec<f64>) -> Result<Self, Error> {
        let sum: f64 = weights.iter().sum();
        if !sum.is_finite() || sum <= 0.0 {
            return Err(Error::InvalidSimplex(format!("unnormalizable total {sum}")));
        }
        let mut w = weights;
        for (i, x) in w.iter_mut().enumerate() {
            if !(*x >= 0.0) {
                return Err(Error::InvalidSimplex(format!("entry {i} is {x}")));
            }
            *x /= sum;
        }
        Ok(Simplex(w))
    }

    pub fn one_hot(k: usize, index: usize) -> Self {
        assert!(index < k, "one-hot index {index} out of range for K={k}");
        let mut v = vec![0.0; k];
        v[index] = 1.0;
        Simplex(v)
    }

    pub fn uniform(k: usize) -> Self {
        Simplex(vec![1.0 / k as f64; k])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn get(&self, i: usize) -> f64 {
        self.0[i]
    }

    pub fn argmax(&self) -> usize {
        self.0
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
            .unwrap()
    }

    /// Floor every entry at `floor` and renormalize; used before taking logs
    /// of denoiser outputs.
    pub fn floor_and_renormalize(&self, floor: f64) -> Simplex {
        let w: Vec<f64> = self.0.iter().map(|&p| p.max(floor)).collect();
        let sum: f64 = w.iter().sum();
        Simplex(w.into_iter().map(|p| p / sum).collect())
    }

    /// Total variation distance to another distribution on the same support.
    pub fn tv_distance(&self, other: &Simplex) -> f64 {
        assert_eq!(self.len(), other.len());
        0.5 * self
            .0
            .iter()
            .zip(other.probs())
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

/// Noise prior over the vocabulary: all mass on a designated mask token, or
/// uniform over all K categories.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum PriorKind {
    Masked { mask_index: usize },
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PriorSpec {
    pub vocab_size: usize,
    pub kind: PriorKind,
}

impl PriorSpec {
    pub fn masked(vocab_size: usize, mask_index: usize) -> Result<Self, Error> {
        if vocab_size < 2 {
            return Err(Error::arg("vocabulary size must be at least 2"));
        }
        if mask_index >= vocab_size {
            return Err(Error::IndexOutOfRange {
                index: mask_index,
                size: vocab_size,
            });
        }
        Ok(PriorSpec {
            vocab_size,
            kind: PriorKind::Masked { mask_index },
        })
    }

    pub fn uniform(vocab_size: usize) -> Result<Self, Error> {
        if vocab_size < 2 {
            return Err(Error::arg("vocabulary size must be at least 2"));
        }
        Ok(PriorSpec {
            vocab_size,
            kind: PriorKind::Uniform,
        })
    }

    pub fn simplex(&self) -> Simplex {
        match self.kind {
            PriorKind::Masked { mask_index } => Simplex::one_hot(self.vocab_size, mask_index),
            PriorKind::Uniform => Simplex::uniform(self.vocab_size),
        }
    }

    pub fn mask_index(&self) -> Option<usize> {
        match self.kind {
            PriorKind::Masked { mask_index } => Some(mask_index),
            PriorKind::Uniform => None,
        }
    }

    fn check_token(&self, token: usize) -> Result<(), Error> {
        if token >= self.vocab_size {
            return Err(Error::IndexOutOfRange {
                index: token,
                size: self.vocab_size,
            });
        }
        Ok(())
    }
}

fn check_alpha(name: &str, alpha: f64) -> Result<(), Error> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::arg(format!("{name}={alpha} outside [0, 1]")));
    }
    Ok(())
}

/// Forward corruption marginal: alpha_t * onehot(x) + (1 - alpha_t) * prior.
pub fn forward_marginal(prior: &PriorSpec, x: usize, alpha_t: f64) -> Result<Simplex, Error> {
    prior.check_token(x)?;
    check_alpha("alpha_t", alpha_t)?;
    let mut probs = prior.simplex().into_vec();
    for p in probs.iter_mut() {
        *p *= 1.0 - alpha_t;
    }
    probs[x] += alpha_t;
    Simplex::new(probs)
}

/// Single-step forward transition Cat(.; alpha_{t|s} z_s + (1 - alpha_{t|s}) prior),
/// the Markov kernel whose composition reproduces the forward marginals.
pub fn forward_transition(
    prior: &PriorSpec,
    z_s: usize,
    alpha_s: f64,
    alpha_t: f64,
) -> Result<Simplex, Error> {
    prior.check_token(z_s)?;
    check_alpha("alpha_s", alpha_s)?;
    check_alpha("alpha_t", alpha_t)?;
    if alpha_s <= 0.0 {
        return Err(Error::arg("alpha_s must be positive for a conditional step"));
    }
    if alpha_t > alpha_s {
        return Err(Error::arg("alpha_t must not exceed alpha_s"));
    }
    let ratio = alpha_t / alpha_s;
    let mut probs = prior.simplex().into_vec();
    for p in probs.iter_mut() {
        *p *= 1.0 - ratio;
    }
    probs[z_s] += ratio;
    Simplex::new(probs)
}

/// Masked-prior reverse posterior.
///
/// For z_t equal to the mask the result mixes the clean-token distribution
/// and the mask with weights (alpha_s - alpha_t)/(1 - alpha_t) and
/// (1 - alpha_s)/(1 - alpha_t); otherwise it is the clean-token
/// distribution itself.
pub fn mdm_posterior(
    prior: &PriorSpec,
    x: &Simplex,
    z_t: usize,
    alpha_s: f64,
    alpha_t: f64,
) -> Result<Simplex, Error> {
    let mask = prior.mask_index().ok_or_else(|| {
        Error::arg("masked-prior posterior requires a masked prior")
    })?;
    prior.check_token(z_t)?;
    check_step(prior, x, alpha_s, alpha_t)?;
    if alpha_t >= 1.0 {
        return Err(Error::DegenerateDivision);
    }
    if z_t != mask {
        return Ok(x.clone());
    }
    let w_x = (alpha_s - alpha_t) / (1.0 - alpha_t);
    let w_m = (1.0 - alpha_s) / (1.0 - alpha_t);
    let mut probs: Vec<f64> = x.probs().iter().map(|&p| w_x * p).collect();
    probs[mask] += w_m;
    Simplex::from_unnormalized(probs)
}

/// Uniform-prior reverse posterior.
///
/// Evaluates, with alpha_{t|s} = alpha_t / alpha_s and r the observed latent,
///
/// ```text
///   K a_t x_r e_r + (a_{t|s} - a_t) e_r + (a_s - a_t) x + (1 - a_{t|s})(1 - a_s) 1/K
///   -------------------------------------------------------------------------------
///                          K a_t x_r + 1 - a_t
/// ```
///
/// A denominator below 1e-300 is rescaled by 2^1000 before dividing so the
/// ratio survives even when every term is subnormal.
pub fn usdm_posterior(
    prior: &PriorSpec,
    x: &Simplex,
    z_t: usize,
    alpha_s: f64,
    alpha_t: f64,
) -> Result<Simplex, Error> {
    if prior.kind != PriorKind::Uniform {
        return Err(Error::arg("uniform-prior posterior requires a uniform prior"));
    }
    prior.check_token(z_t)?;
    check_step(prior, x, alpha_s, alpha_t)?;
    if alpha_s <= 0.0 {
        return Err(Error::arg("alpha_s = 0 rejected (conditional step undefined)"));
    }
    let k = prior.vocab_size as f64;
    let ratio = alpha_t / alpha_s;
    let x_r = x.get(z_t);
    let mut denom = k * alpha_t * x_r + 1.0 - alpha_t;
    let mut scale = 1.0;
    if denom < 1e-300 {
        // Rescaled arithmetic in place of extended precision: every term in
        // the numerator shares the denominator's magnitude.
        scale = 2f64.powi(1000);
        denom *= scale;
        if denom < 1e-300 {
            // Fully degenerate zero-width limit; the latent carries over.
            return Ok(Simplex::one_hot(prior.vocab_size, z_t));
        }
    }
    let c_uniform = (1.0 - ratio) * (1.0 - alpha_s) / k;
    let c_x = alpha_s - alpha_t;
    let c_z = ratio - alpha_t;
    let c_zx = k * alpha_t;
    let mut probs = Vec::with_capacity(prior.vocab_size);
    for c in 0..prior.vocab_size {
        let mut num = c_uniform + c_x * x.get(c);
        if c == z_t {
            num += c_z + c_zx * x_r;
        }
        probs.push(num * scale / denom);
    }
    Simplex::from_unnormalized(probs)
}

/// Reverse posterior dispatched on the prior kind.
pub fn reverse_posterior(
    prior: &PriorSpec,
    x: &Simplex,
    z_t: usize,
    alpha_s: f64,
    alpha_t: f64,
) -> Result<Simplex, Error> {
    match prior.kind {
        PriorKind::Masked { .. } => mdm_posterior(prior, x, z_t, alpha_s, alpha_t),
        PriorKind::Uniform => usdm_posterior(prior, x, z_t, alpha_s, alpha_t),
    }
}

/// Fully denoising posterior q_{0|t}: the s -> 0 specialization with
/// alpha_0 = 1. For a masked prior this is the clean-token distribution
/// unchanged.
pub fn q0t_posterior(
    prior: &PriorSpec,
    x: &Simplex,
    z_t: usize,
    alpha_t: f64,
) -> Result<Simplex, Error> {
    match prior.kind {
        PriorKind::Masked { .. } => {
            prior.check_token(z_t)?;
            check_step(prior, x, 1.0, alpha_t)?;
            Ok(x.clone())
        }
        PriorKind::Uniform => usdm_posterior(prior, x, z_t, 1.0, alpha_t),
    }
}

/// Superposition of the reverse posterior and the forward marginal with
/// corrector weight kappa; this is the exact-x form.
pub fn psi_posterior_true(
    prior: &PriorSpec,
    x: usize,
    z_t: usize,
    kappa: f64,
    alpha_s: f64,
    alpha_t: f64,
) -> Result<Simplex, Error> {
    check_kappa(kappa)?;
    prior.check_token(x)?;
    // Degenerate full-noise step: both branches collapse to the prior.
    if alpha_s <= 0.0 && alpha_t <= 0.0 {
        return Ok(prior.simplex());
    }
    let x_simplex = Simplex::one_hot(prior.vocab_size, x);
    let predictor = reverse_posterior(prior, &x_simplex, z_t, alpha_s, alpha_t)?;
    let corrector = forward_marginal(prior, x, alpha_s)?;
    mix(&predictor, &corrector, kappa)
}

/// Model-side superposition posterior: the corrector branch replaces the
/// unavailable clean token by alpha_s q_{0|t} + (1 - alpha_s) prior.
pub fn psi_posterior_model(
    prior: &PriorSpec,
    x_theta: &Simplex,
    z_t: usize,
    kappa: f64,
    alpha_s: f64,
    alpha_t: f64,
) -> Result<Simplex, Error> {
    check_kappa(kappa)?;
    if alpha_s <= 0.0 && alpha_t <= 0.0 {
        return Ok(prior.simplex());
    }
    let predictor = reverse_posterior(prior, x_theta, z_t, alpha_s, alpha_t)?;
    let denoised = q0t_posterior(prior, x_theta, z_t, alpha_t)?;
    let prior_probs = prior.simplex();
    let corrector: Vec<f64> = denoised
        .probs()
        .iter()
        .zip(prior_probs.probs())
        .map(|(&d, &p)| alpha_s * d + (1.0 - alpha_s) * p)
        .collect();
    let corrector = Simplex::from_unnormalized(corrector)?;
    mix(&predictor, &corrector, kappa)
}

/// Remasking posterior for masked diffusion with per-step remask level
/// sigma_t in [0, min(1, (1 - alpha_s)/alpha_t)]. With sigma_t = 0 this is
/// exactly the masked-prior reverse posterior.
pub fn remdm_posterior(
    prior: &PriorSpec,
    x: &Simplex,
    z_t: usize,
    sigma_t: f64,
    alpha_s: f64,
    alpha_t: f64,
) -> Result<Simplex, Error> {
    let mask = prior.mask_index().ok_or_else(|| {
        Error::arg("remasking posterior requires a masked prior")
    })?;
    prior.check_token(z_t)?;
    check_step(prior, x, alpha_s, alpha_t)?;
    let sigma_max = KappaSchedule::sigma_max(alpha_s, alpha_t);
    if !(0.0..=1.0).contains(&sigma_t) || sigma_t > sigma_max + 1e-12 {
        return Err(Error::arg(format!(
            "sigma_t={sigma_t} outside [0, {sigma_max}]"
        )));
    }
    let mut probs: Vec<f64>;
    if z_t != mask {
        probs = x.probs().iter().map(|&p| (1.0 - sigma_t) * p).collect();
        probs[mask] += sigma_t;
    } else {
        if alpha_t >= 1.0 {
            return Err(Error::DegenerateDivision);
        }
        let w_x = (alpha_s - (1.0 - sigma_t) * alpha_t) / (1.0 - alpha_t);
        let w_m = (1.0 - alpha_s - sigma_t * alpha_t) / (1.0 - alpha_t);
        probs = x.probs().iter().map(|&p| w_x * p).collect();
        probs[mask] += w_m;
    }
    // Clamp the tiny negatives that the subtraction form can produce at the
    // sigma_max boundary.
    for p in probs.iter_mut() {
        if *p < 0.0 && *p > -1e-12 {
            *p = 0.0;
        }
    }
    Simplex::from_unnormalized(probs)
}

fn mix(a: &Simplex, b: &Simplex, kappa: f64) -> Result<Simplex, Error> {
    let probs = a
        .probs()
        .iter()
        .zip(b.probs())
        .map(|(&pa, &pb)| kappa * pa + (1.0 - kappa) * pb)
        .collect();
    Simplex::from_unnormalized(probs)
}

fn check_kappa(kappa: f64) -> Result<(), Error> {
    if !(0.0..=1.0).contains(&kappa) {
        return Err(Error::arg(format!("kappa={kappa} outside [0, 1]")));
    }
    Ok(())
}

fn check_step(prior: &PriorSpec, x: &Simplex, alpha_s: f64, alpha_t: f64) -> Result<(), Error> {
    if x.len() != prior.vocab_size {
        return Err(Error::arg(format!(
            "clean-token simplex has {} entries, vocabulary has {}",
            x.len(),
            prior.vocab_size
        )));
    }
    check_alpha("alpha_s", alpha_s)?;
    check_alpha("alpha_t", alpha_t)?;
    if alpha_t > alpha_s + 1e-15 {
        return Err(Error::arg(format!(
            "expected alpha_t <= alpha_s, got {alpha_t} > {alpha_s}"
        )));
    }
    Ok(())
}

/// Result of the marginal-preservation enumeration.
#[derive(Debug, Clone)]
pub struct MarginalCheck {
    /// Largest total-variation deviation from the forward marginal over the
    /// whole grid.
    pub max_tv: f64,
    /// Per-grid-time deviations, indexed from t = 1 down to t = 0.
    pub per_time_tv: Vec<f64>,
}

/// Exact single-token enumeration of the superposition reverse chain.
///
/// Starting from the forward marginal at t = 1 (the prior itself whenever
/// the schedule reaches zero signal; clamped schedules shift it by their
/// epsilon), pushes the distribution through `psi_posterior_true` step by
/// step and records the total-variation gap to the forward marginal at
/// every grid time. The gap stays at rounding level for any kappa
/// schedule; this is the project's gating check.
pub fn verify_psi_marginals(
    prior: &PriorSpec,
    x: usize,
    schedule: &dyn Schedule,
    kappa_schedule: &KappaSchedule,
    t_steps: usize,
) -> Result<MarginalCheck, Error> {
    prior.check_token(x)?;
    let grid = crate::schedules::TimeGrid::uniform(t_steps)?;
    let times = grid.times();
    let k = prior.vocab_size;

    let mut current = forward_marginal(prior, x, schedule.alpha(1.0)?)?.into_vec();
    let mut per_time_tv = Vec::with_capacity(times.len());
    let mut max_tv: f64 = 0.0;

    let mut record = |dist: &[f64], t: f64| -> Result<(), Error> {
        let alpha = schedule.alpha(t)?;
        let target = forward_marginal(prior, x, alpha)?;
        let tv = 0.5
            * dist
                .iter()
                .zip(target.probs())
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>();
        max_tv = max_tv.max(tv);
        per_time_tv.push(tv);
        Ok(())
    };

    record(&current, 1.0)?;
    for i in (1..times.len()).rev() {
        let t = times[i];
        let s = times[i - 1];
        let alpha_t = schedule.alpha(t)?;
        let alpha_s = schedule.alpha(s)?;
        let kappa = kappa_schedule.eval(t, alpha_s, alpha_t)?;
        let mut next = vec![0.0; k];
        for z_t in 0..k {
            if current[z_t] == 0.0 {
                continue;
            }
            let step = psi_posterior_true(prior, x, z_t, kappa, alpha_s, alpha_t)?;
            for (c, &p) in step.probs().iter().enumerate() {
                next[c] += current[z_t] * p;
            }
        }
        current = next;
        record(&current, s)?;
    }
    Ok(MarginalCheck {
        max_tv,
        per_time_tv,
    })
}
