// Temporary diagnostic: exact expected pointwise loss vs the KL rate of the
// reverse posteriors, and the enumerated bound trend in T.

use psidiff::objectives::{pointwise_loss_f, psi_nelbo_bound, Denoiser, LossContext};
use psidiff::processes::{forward_marginal, usdm_posterior, PriorSpec};
use psidiff::schedules::{KappaSchedule, NoiseSchedule, Schedule};
use psidiff::synthetic::{ExactBayesDenoiser, SyntheticSource};

#[test]
fn diag_rate_vs_f() {
    let source = SyntheticSource::fixture_iid_k2(1);
    let prior = PriorSpec::uniform(2).unwrap();
    let schedule = NoiseSchedule::LogLinear;
    let denoiser = ExactBayesDenoiser::new(&source, prior, Box::new(schedule)).unwrap();
    let x = 0usize;

    for &t in &[0.2, 0.5, 0.8] {
        let p = schedule.eval(t).unwrap();
        let ctx = LossContext::new(2, p.alpha, p.alpha_prime).unwrap();
        let marg = forward_marginal(&prior, x, p.alpha).unwrap();
        let mut e_f = 0.0;
        let mut e_rate = 0.0;
        for z in 0..2 {
            let xth = denoiser.denoise(&[z], t)[0].floor_and_renormalize(1e-12);
            let f = pointwise_loss_f(&ctx, z, x, &xth).unwrap();
            // KL rate via small step.
            let dt = 1e-6;
            let s = t - dt;
            let alpha_s = schedule.alpha(s).unwrap();
            let truth = usdm_posterior(&prior, &psidiff::processes::Simplex::one_hot(2, x), z, alpha_s, p.alpha).unwrap();
            let model = usdm_posterior(&prior, &xth, z, alpha_s, p.alpha).unwrap();
            let mut kl = 0.0;
            for c in 0..2 {
                if truth.get(c) > 0.0 {
                    kl += truth.get(c) * (truth.get(c) / model.get(c)).ln();
                }
            }
            let rate = kl / dt;
            println!("t={t} z={z}: f={f:+.6}  rate={rate:+.6}");
            e_f += marg.get(z) * f;
            e_rate += marg.get(z) * rate;
        }
        println!("t={t}: E[f]={e_f:+.6}  E[rate]={e_rate:+.6}");
    }

    // Integral of E[f] over t by midpoint rule.
    let n = 400;
    let mut total = 0.0;
    for i in 0..n {
        let t = (i as f64 + 0.5) / n as f64;
        let p = schedule.eval(t).unwrap();
        let ctx = LossContext::new(2, p.alpha, p.alpha_prime).unwrap();
        let marg = forward_marginal(&prior, x, p.alpha).unwrap();
        for z in 0..2 {
            let xth = denoiser.denoise(&[z], t)[0].floor_and_renormalize(1e-12);
            let f = pointwise_loss_f(&ctx, z, x, &xth).unwrap();
            total += marg.get(z) * f / n as f64;
        }
    }
    println!("integral of E[f] dt = {total:+.6}  (-ln p(x) = {:.6})", -(0.7f64).ln());

    for t_steps in [2usize, 4, 8] {
        let b = psi_nelbo_bound(x, &prior, &schedule, &KappaSchedule::ANCESTRAL, &denoiser, t_steps)
            .unwrap();
        println!(
            "bound T={t_steps}: total={:.6} recon={:.6} klsum={:.6}",
            b.total, b.reconstruction, b.kl_sum
        );
    }
}

#[test]
fn diag_corruption_direction() {
    use psidiff::objectives::nelbo_discrete;
    use psidiff::processes::Simplex;

    let source = SyntheticSource::fixture_iid_k4(1);
    let prior = PriorSpec::uniform(4).unwrap();
    let schedule = NoiseSchedule::LogLinear;

    struct Mixed {
        inner: ExactBayesDenoiser,
        rho: f64,
        sharpen: bool,
    }
    impl Denoiser for Mixed {
        fn denoise(&self, z: &[usize], t: f64) -> Vec<Simplex> {
            self.inner
                .denoise(z, t)
                .into_iter()
                .map(|s| {
                    let k = s.len();
                    let target: Vec<f64> = if self.sharpen {
                        let arg = s.argmax();
                        (0..k).map(|c| if c == arg { 1.0 } else { 0.0 }).collect()
                    } else {
                        vec![1.0 / k as f64; k]
                    };
                    let mixed: Vec<f64> = s
                        .probs()
                        .iter()
                        .zip(&target)
                        .map(|(&p, &q)| (1.0 - self.rho) * p + self.rho * q)
                        .collect();
                    Simplex::new(mixed).unwrap()
                })
                .collect()
        }
    }

    let dist = source.enumerate_distribution().unwrap();
    for sharpen in [false, true] {
        for rho in [0.0, 0.1, 0.3, 0.5] {
            let den = Mixed {
                inner: ExactBayesDenoiser::new(&source, prior, Box::new(schedule)).unwrap(),
                rho,
                sharpen,
            };
            let mut total = 0.0;
            for (seq, p) in &dist {
                let e = nelbo_discrete(seq, &den, &prior, &schedule, 20_000, 3).unwrap();
                total += p * e.value;
            }
            println!("sharpen={sharpen} rho={rho}: E[NELBO]={total:.4}");
        }
    }
}

#[test]
fn diag_train_lr() {
    use psidiff::objectives::{nelbo_discrete, TabularDenoiser};
    let source = SyntheticSource::fixture_iid_k4(1);
    let prior = PriorSpec::uniform(4).unwrap();
    let schedule = NoiseSchedule::LogLinear;
    let dist = source.enumerate_distribution().unwrap();
    let eval = |d: &dyn Denoiser| -> f64 {
        dist.iter()
            .map(|(seq, p)| p * nelbo_discrete(seq, d, &prior, &schedule, 30_000, 41).unwrap().value)
            .sum()
    };
    let oracle = ExactBayesDenoiser::new(&source, prior, Box::new(schedule)).unwrap();
    println!("oracle: {:.4}", eval(&oracle));
    println!("uniform: {:.4}", eval(&TabularDenoiser::new_uniform(4, 8)));
    for lr in [0.02f64, 0.05, 0.1, 0.3] {
        let mut m = TabularDenoiser::new_uniform(4, 8);
        m.train(&source, &prior, &schedule, 80_000, lr, 43).unwrap();
        println!("lr={lr}: {:.4}", eval(&m));
    }
}
