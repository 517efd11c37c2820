//! Noise schedules for the discrete and Gaussian corruption processes and
//! corrector-strength (kappa) schedules, including the remasking-equivalent
//! cap/rescale/loop forms.

use crate::error::Error;
use serde::{Deserialize, Serialize};

/// Signal level and its time derivative at one point of a schedule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlphaPoint {
    pub alpha: f64,
    pub alpha_prime: f64,
}

/// A signal-level trajectory alpha(t) on t in [0, 1], non-increasing in t.
pub trait Schedule: Send + Sync {
    fn eval(&self, t: f64) -> Result<AlphaPoint, Error>;

    fn alpha(&self, t: f64) -> Result<f64, Error> {
        Ok(self.eval(t)?.alpha)
    }
}

/// Clamp applied to the log-linear schedule so both endpoints stay strictly
/// inside (0, 1) and downstream divisions by alpha or 1 - alpha are safe.
pub const ALPHA_CLAMP_EPS: f64 = 1e-5;

/// Closed-form noise schedules.
///
/// * `LogLinear`: alpha(t) = 1 - t, clamped to `[eps, 1 - eps]`.
/// * `Cosine`: alpha(t) = cos²(π t / 2).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseSchedule {
    LogLinear,
    Cosine,
}

impl Schedule for NoiseSchedule {
    fn eval(&self, t: f64) -> Result<AlphaPoint, Error> {
        check_time(t)?;
        match self {
            NoiseSchedule::LogLinear => {
                let raw = 1.0 - t;
                let alpha = raw.clamp(ALPHA_CLAMP_EPS, 1.0 - ALPHA_CLAMP_EPS);
                let alpha_prime = if raw > ALPHA_CLAMP_EPS && raw < 1.0 - ALPHA_CLAMP_EPS {
                    -1.0
                } else {
                    0.0
                };
                Ok(AlphaPoint { alpha, alpha_prime })
            }
            NoiseSchedule::Cosine => {
                let half = std::f64::consts::FRAC_PI_2 * t;
                let alpha = half.cos().powi(2);
                let alpha_prime =
                    -std::f64::consts::FRAC_PI_2 * (std::f64::consts::PI * t).sin();
                Ok(AlphaPoint { alpha, alpha_prime })
            }
        }
    }
}

fn check_time(t: f64) -> Result<(), Error> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::TimeOutOfRange { t });
    }
    Ok(())
}

/// Piecewise-linear alpha trajectory used together with loop-style kappa
/// schedules: alpha rises from 0 to `alpha_on` as t falls to `t_on`, holds
/// flat on `[t_off, t_on]`, then rises to 1 at t = 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoopSchedule {
    pub t_on: f64,
    pub t_off: f64,
    pub alpha_on: f64,
}

impl LoopSchedule {
    /// Hold level taken from the base schedule at `t_on`.
    pub fn from_base(base: &dyn Schedule, t_on: f64, t_off: f64) -> Result<Self, Error> {
        let alpha_on = base.alpha(t_on)?;
        Self::new(t_on, t_off, alpha_on)
    }

    pub fn new(t_on: f64, t_off: f64, alpha_on: f64) -> Result<Self, Error> {
        if !(0.0 < t_off && t_off < t_on && t_on < 1.0) {
            return Err(Error::arg(format!(
                "loop window requires 0 < t_off < t_on < 1, got t_off={t_off}, t_on={t_on}"
            )));
        }
        if !(0.0..=1.0).contains(&alpha_on) {
            return Err(Error::arg(format!("alpha_on={alpha_on} outside [0, 1]")));
        }
        Ok(LoopSchedule {
            t_on,
            t_off,
            alpha_on,
        })
    }

    pub fn in_window(&self, t: f64) -> bool {
        t >= self.t_off && t <= self.t_on
    }
}

impl Schedule for LoopSchedule {
    fn eval(&self, t: f64) -> Result<AlphaPoint, Error> {
        check_time(t)?;
        if t > self.t_on {
            Ok(AlphaPoint {
                alpha: self.alpha_on * (1.0 - t) / (1.0 - self.t_on),
                alpha_prime: -self.alpha_on / (1.0 - self.t_on),
            })
        } else if t >= self.t_off {
            Ok(AlphaPoint {
                alpha: self.alpha_on,
                alpha_prime: 0.0,
            })
        } else {
            Ok(AlphaPoint {
                alpha: self.alpha_on + (1.0 - self.alpha_on) * (self.t_off - t) / self.t_off,
                alpha_prime: -(1.0 - self.alpha_on) / self.t_off,
            })
        }
    }
}

/// Corrector-strength schedule. `eval` returns kappa in [0, 1]; values of 1
/// reduce the superposition posterior to plain ancestral sampling.
///
/// Cap and rescale parameterize the implied per-step noise level
/// sigma = (1 - kappa)(1 - alpha_s) through its admissible upper bound
/// sigma_max = min(1, (1 - alpha_s) / alpha_t). Loop applies a constant
/// sigma = eta inside `[t_off, t_on]` (pair it with [`LoopSchedule`]), and
/// the window kind sets kappa = eta directly inside the window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum KappaSchedule {
    Constant { kappa: f64 },
    Cap { eta: f64 },
    Rescale { eta: f64 },
    Loop { eta: f64, t_on: f64, t_off: f64 },
    Window { eta: f64, t_on: f64, t_off: f64 },
}

impl KappaSchedule {
    pub const ANCESTRAL: KappaSchedule = KappaSchedule::Constant { kappa: 1.0 };

    /// Upper bound on the per-step noise level sigma_t.
    pub fn sigma_max(alpha_s: f64, alpha_t: f64) -> f64 {
        if alpha_t <= 0.0 {
            1.0
        } else {
            ((1.0 - alpha_s) / alpha_t).min(1.0)
        }
    }

    /// Evaluate kappa at time `t` for the step `alpha_t -> alpha_s`.
    pub fn eval(&self, t: f64, alpha_s: f64, alpha_t: f64) -> Result<f64, Error> {
        check_time(t)?;
        if !(0.0..=1.0).contains(&alpha_s) || !(0.0..=1.0).contains(&alpha_t) {
            return Err(Error::arg(format!(
                "alpha values outside [0, 1]: alpha_s={alpha_s}, alpha_t={alpha_t}"
            )));
        }
        if alpha_t > alpha_s {
            return Err(Error::arg(format!(
                "expected alpha_t <= alpha_s, got alpha_t={alpha_t} > alpha_s={alpha_s}"
            )));
        }
        match *self {
            KappaSchedule::Constant { kappa } => {
                check_unit("kappa", kappa)?;
                Ok(kappa)
            }
            KappaSchedule::Cap { eta } => {
                check_unit("eta", eta)?;
                let sigma = eta.min(Self::sigma_max(alpha_s, alpha_t));
                kappa_from_sigma(sigma, alpha_s)
            }
            KappaSchedule::Rescale { eta } => {
                check_unit("eta", eta)?;
                let sigma = eta * Self::sigma_max(alpha_s, alpha_t);
                kappa_from_sigma(sigma, alpha_s)
            }
            KappaSchedule::Loop { eta, t_on, t_off } => {
                check_unit("eta", eta)?;
                if t >= t_off && t <= t_on {
                    kappa_from_sigma(eta, alpha_s)
                } else {
                    Ok(1.0)
                }
            }
            KappaSchedule::Window { eta, t_on, t_off } => {
                check_unit("eta", eta)?;
                if t >= t_off && t <= t_on {
                    Ok(eta)
                } else {
                    Ok(1.0)
                }
            }
        }
    }

    /// True when this schedule is identically one (the ancestral limit).
    pub fn is_ancestral(&self) -> bool {
        matches!(self, KappaSchedule::Constant { kappa } if *kappa == 1.0)
    }
}

/// kappa = 1 - sigma / (1 - alpha_s), clamped into [0, 1] to absorb
/// floating-point overshoot.
fn kappa_from_sigma(sigma: f64, alpha_s: f64) -> Result<f64, Error> {
    let denom = 1.0 - alpha_s;
    if denom <= 0.0 {
        if sigma == 0.0 {
            return Ok(1.0);
        }
        return Err(Error::DegenerateDivision);
    }
    Ok((1.0 - sigma / denom).clamp(0.0, 1.0))
}

fn check_unit(name: &str, v: f64) -> Result<(), Error> {
    if !(0.0..=1.0).contains(&v) {
        return Err(Error::arg(format!("{name}={v} outside [0, 1]")));
    }
    Ok(())
}

/// Uniform sampling grid t(i) = i / T, i = 0..=T.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    times: Vec<f64>,
}

impl TimeGrid {
    pub fn uniform(t_steps: usize) -> Result<Self, Error> {
        if t_steps == 0 {
            return Err(Error::arg("step count must be positive"));
        }
        let times = (0..=t_steps).map(|i| i as f64 / t_steps as f64).collect();
        Ok(TimeGrid { times })
    }

    /// Increasing grid times from 0 to 1 inclusive.
    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn steps(&self) -> usize {
        self.times.len() - 1
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn log_linear_endpoints() {
        let s = NoiseSchedule::LogLinear;
        let a0 = s.alpha(0.0).unwrap();
        let a1 = s.alpha(1.0).unwrap();
        assert!((a0 - (1.0 - ALPHA_CLAMP_EPS)).abs() < 1e-15);
        assert!((a1 - ALPHA_CLAMP_EPS).abs() < 1e-15);
    }

    #[test]
    fn cosine_midpoint_matches_closed_form() {
        // cos²(π/4) = 1/2.
        let a = NoiseSchedule::Cosine.alpha(0.5).unwrap();
        assert!((a - 0.5).abs() < 1e-15);
        assert!((NoiseSchedule::Cosine.alpha(0.0).unwrap() - 1.0).abs() < 1e-15);
        assert!(NoiseSchedule::Cosine.alpha(1.0).unwrap().abs() < 1e-30);
    }

    #[test]
    fn rejects_time_outside_unit_interval() {
        assert!(NoiseSchedule::LogLinear.alpha(-0.1).is_err());
        assert!(NoiseSchedule::Cosine.alpha(1.5).is_err());
    }

    #[test]
    fn derivatives_match_central_differences() {
        let h = 1e-6;
        for schedule in [NoiseSchedule::LogLinear, NoiseSchedule::Cosine] {
            for i in 1..40 {
                let t = 0.02 + 0.96 * i as f64 / 40.0;
                let p = schedule.eval(t).unwrap();
                let fd = (schedule.alpha(t + h).unwrap() - schedule.alpha(t - h).unwrap())
                    / (2.0 * h);
                let scale = fd.abs().max(1e-3);
                assert!(
                    (p.alpha_prime - fd).abs() / scale < 1e-6,
                    "{schedule:?} at t={t}: {} vs {fd}",
                    p.alpha_prime
                );
                assert!(p.alpha_prime <= 0.0);
            }
        }
    }

    #[test]
    fn monotone_non_increasing_alpha() {
        for schedule in [NoiseSchedule::LogLinear, NoiseSchedule::Cosine] {
            let mut prev = f64::INFINITY;
            for i in 0..=200 {
                let a = schedule.alpha(i as f64 / 200.0).unwrap();
                assert!(a <= prev + 1e-15);
                assert!((0.0..=1.0).contains(&a));
                prev = a;
            }
        }
    }

    #[test]
    fn constant_kappa_one_is_ancestral() {
        let k = KappaSchedule::ANCESTRAL;
        assert_eq!(k.eval(0.3, 0.9, 0.2).unwrap(), 1.0);
        assert_eq!(k.eval(0.9, 0.1, 0.1).unwrap(), 1.0);
        assert!(k.is_ancestral());
    }

    #[test]
    fn rescale_hand_computed_value() {
        // eta = 0.05, alpha_t = 0.5, alpha_s = 0.6:
        // sigma_max = min(1, 0.4/0.5) = 0.8, sigma = 0.04, kappa = 1 - 0.04/0.4 = 0.9.
        let k = KappaSchedule::Rescale { eta: 0.05 };
        let got = k.eval(0.5, 0.6, 0.5).unwrap();
        assert!((got - 0.9).abs() < 1e-12);
    }

    #[test]
    fn cap_hand_computed_value() {
        // eta = 0.005, alpha_t = 0.9, alpha_s = 0.95:
        // sigma = min(0.005, 0.05/0.9) = 0.005, kappa = 1 - 0.005/0.05 = 0.9.
        let k = KappaSchedule::Cap { eta: 0.005 };
        let got = k.eval(0.5, 0.95, 0.9).unwrap();
        assert!((got - 0.9).abs() < 1e-12);
    }

    #[test]
    fn degenerate_division_raised_only_for_nonzero_sigma() {
        // alpha_s = 1 forces sigma_max = 0, so cap/rescale collapse to kappa = 1.
        assert_eq!(
            KappaSchedule::Rescale { eta: 0.5 }.eval(0.1, 1.0, 0.9).unwrap(),
            1.0
        );
        // An explicit nonzero sigma at alpha_s = 1 is rejected.
        let loop_k = KappaSchedule::Loop {
            eta: 0.05,
            t_on: 0.9,
            t_off: 0.05,
        };
        assert!(matches!(
            loop_k.eval(0.5, 1.0, 0.9),
            Err(Error::DegenerateDivision)
        ));
    }

    #[test]
    fn implied_sigma_stays_in_bounds_under_random_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let kinds = [
            KappaSchedule::Constant { kappa: 0.7 },
            KappaSchedule::Cap { eta: 0.02 },
            KappaSchedule::Rescale { eta: 0.3 },
            KappaSchedule::Loop {
                eta: 0.05,
                t_on: 0.8,
                t_off: 0.2,
            },
            KappaSchedule::Window {
                eta: 0.85,
                t_on: 0.8,
                t_off: 0.2,
            },
        ];
        for _ in 0..1000 {
            let t: f64 = rng.random();
            let a: f64 = rng.random();
            let b: f64 = rng.random();
            let (alpha_t, alpha_s) = if a < b { (a, b) } else { (b, a) };
            for k in &kinds {
                let kappa = k.eval(t, alpha_s, alpha_t).unwrap();
                assert!((0.0..=1.0).contains(&kappa));
                let sigma = (1.0 - kappa) * (1.0 - alpha_s);
                let sigma_max = KappaSchedule::sigma_max(alpha_s, alpha_t);
                assert!(sigma >= -1e-15);
                assert!(sigma <= sigma_max + 1e-12, "{k:?}: {sigma} > {sigma_max}");
            }
        }
    }

    #[test]
    fn loop_trajectory_is_flat_inside_window_and_monotone() {
        let base = NoiseSchedule::LogLinear;
        let loop_sched = LoopSchedule::from_base(&base, 0.6, 0.2).unwrap();
        assert!((loop_sched.alpha_on - base.alpha(0.6).unwrap()).abs() < 1e-15);
        let grid = TimeGrid::uniform(100).unwrap();
        let mut prev = f64::INFINITY;
        for &t in grid.times().iter().rev() {
            let a = loop_sched.alpha(t).unwrap();
            assert!(a >= -1e-15 && a <= 1.0 + 1e-15);
            // alpha grows as t decreases.
            assert!(prev == f64::INFINITY || a >= prev - 1e-12);
            if loop_sched.in_window(t) {
                assert_eq!(a, loop_sched.alpha_on);
            }
            prev = a;
        }
        assert!((loop_sched.alpha(0.0).unwrap() - 1.0).abs() < 1e-12);
        assert!(loop_sched.alpha(1.0).unwrap().abs() < 1e-12);
    }

    #[test]
    fn time_grid_is_strictly_increasing() {
        let g = TimeGrid::uniform(8).unwrap();
        assert_eq!(g.times().len(), 9);
        assert_eq!(g.times()[0], 0.0);
        assert_eq!(g.times()[8], 1.0);
        for w in g.times().windows(2) {
            assert!(w[0] < w[1]);
        }
        assert!(TimeGrid::uniform(0).is_err());
    }
}
