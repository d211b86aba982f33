//! Variance-preserving noise schedules, forward noising and the single-step
//! reverse updates built on them.
//!
//! A schedule stores `α_t` and `σ_t` on the integer grid `0..=T` with
//! `α_t² + σ_t² = 1`. Noised samples are `x_t = α_t·x_0 + σ_t·ε`.

use std::fmt;
use std::str::FromStr;

use gradkit::Array;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest noise level at `t = 0`; keeps every `σ_t` strictly positive.
pub const SIGMA_MIN: f64 = 1e-3;
/// `α_t` below this makes the clean-sample estimate singular.
pub const ALPHA_FLOOR: f64 = 1e-8;
const MAX_BETA: f64 = 0.999;
const COSINE_OFFSET: f64 = 0.008;
const LINEAR_BETA_MIN: f64 = 0.1;
const LINEAR_BETA_MAX: f64 = 20.0;

/// Step count used when a configuration does not name one.
pub const DEFAULT_STEPS: usize = 50;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Cosine,
    Linear,
}

impl ScheduleKind {
    pub const ALL: [ScheduleKind; 2] = [ScheduleKind::Cosine, ScheduleKind::Linear];

    pub fn name(self) -> &'static str {
        match self {
            ScheduleKind::Cosine => "cosine",
            ScheduleKind::Linear => "linear",
        }
    }
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ScheduleKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::UnknownName {
                what: "schedule kind",
                name: s.to_string(),
                known: "cosine, linear".into(),
            })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Schedule {
    kind: ScheduleKind,
    steps: usize,
    alpha: Vec<f64>,
    sigma: Vec<f64>,
}

impl Schedule {
    pub fn new(kind: ScheduleKind, steps: usize) -> Result<Self> {
        if steps < 2 {
            return Err(Error::Config(format!("schedule needs at least 2 steps, got {steps}")));
        }
        let betas: Vec<f64> = match kind {
            ScheduleKind::Cosine => {
                let f = |t: usize| {
                    let u = (t as f64 / steps as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET);
                    (u * std::f64::consts::FRAC_PI_2).cos().powi(2)
                };
                (1..=steps).map(|t| (1.0 - f(t) / f(t - 1)).min(MAX_BETA)).collect()
            }
            ScheduleKind::Linear => {
                // Discretized continuous-time linear ladder β(τ) = 0.1 + 19.9τ,
                // which keeps the terminal noise level independent of T.
                let log_abar = |t: usize| {
                    let tau = t as f64 / steps as f64;
                    -(LINEAR_BETA_MIN * tau + 0.5 * (LINEAR_BETA_MAX - LINEAR_BETA_MIN) * tau * tau)
                };
                (1..=steps).map(|t| (1.0 - (log_abar(t) - log_abar(t - 1)).exp()).min(MAX_BETA)).collect()
            }
        };
        let mut alpha_bar = Vec::with_capacity(steps + 1);
        alpha_bar.push(1.0 - SIGMA_MIN * SIGMA_MIN);
        for b in &betas {
            let prev = *alpha_bar.last().expect("non-empty");
            alpha_bar.push(prev * (1.0 - b));
        }
        let alpha = alpha_bar.iter().map(|a| a.sqrt()).collect();
        let mut sigma: Vec<f64> = alpha_bar.iter().map(|a| (1.0 - a).sqrt()).collect();
        // Avoid the rounding of `1 − (1 − σ²)` at the clean end.
        sigma[0] = SIGMA_MIN;
        Ok(Schedule {
            kind,
            steps,
            alpha,
            sigma,
        })
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    /// Number of discrete steps `T`; valid timesteps are `0..=T`.
    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alpha
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigma
    }

    pub fn check(&self, t: usize) -> Result<()> {
        if t > self.steps {
            return Err(Error::TimestepOutOfRange { t, max: self.steps });
        }
        Ok(())
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t]
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[t]
    }
}

pub fn make_schedule(kind: &str, steps: usize) -> Result<Schedule> {
    Schedule::new(kind.parse()?, steps)
}

/// A condition index, or `None` for the unconditional (null) condition.
pub type Cond = Option<usize>;

/// Anything that predicts the noise in `x_t`.
pub trait NoisePredictor: Sync {
    /// Prediction with one timestep per row.
    fn predict_rows(&self, x: &Array, ts: &[usize], conds: &[Cond]) -> Result<Array>;

    fn predict(&self, x: &Array, t: usize, conds: &[Cond]) -> Result<Array> {
        self.predict_rows(x, &vec![t; x.rows()], conds)
    }

    /// Network evaluations spent per row and call for condition `c`.
    fn evals_per_row(&self, _c: Cond) -> u64 {
        1
    }
}

/// Outcome of one reverse update from `from` to `to` over a batch of rows.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplerStep {
    pub from: usize,
    pub to: usize,
    pub next: Array,
    pub predicted_clean: Array,
    /// Per-row transition log-density; present only for stochastic steps.
    pub log_prob: Option<Vec<f64>>,
}

pub fn forward_noise(x0: &Array, t: usize, eps: &Array, schedule: &Schedule) -> Result<Array> {
    schedule.check(t)?;
    let (a, s) = (schedule.alpha(t), schedule.sigma(t));
    Ok(x0.zip_map(eps, "forward_noise", |x, e| a * x + s * e)?)
}

/// Row-wise forward noising where row `i` is noised to `ts[i]`.
pub fn forward_noise_rows(x0: &Array, ts: &[usize], eps: &Array, schedule: &Schedule) -> Result<Array> {
    if x0.shape() != eps.shape() || ts.len() != x0.rows() {
        return Err(Error::Invalid(format!(
            "forward_noise_rows: {:?} samples, {:?} noise, {} timesteps",
            x0.shape(),
            eps.shape(),
            ts.len()
        )));
    }
    let mut out = x0.clone();
    for (i, &t) in ts.iter().enumerate() {
        schedule.check(t)?;
        let (a, s) = (schedule.alpha(t), schedule.sigma(t));
        for (o, e) in out.row_mut(i).iter_mut().zip(eps.row(i)) {
            *o = a * *o + s * e;
        }
    }
    Ok(out)
}

/// One-step clean estimate `(x_t − σ_t·ε̂)/α_t`.
pub fn tweedie(x_t: &Array, eps_hat: &Array, t: usize, schedule: &Schedule) -> Result<Array> {
    schedule.check(t)?;
    let (a, s) = (schedule.alpha(t), schedule.sigma(t));
    if a < ALPHA_FLOOR {
        return Err(Error::Numerical(format!("alpha_{t} = {a:e} is too small to invert")));
    }
    Ok(x_t.zip_map(eps_hat, "tweedie", |x, e| (x - s * e) / a)?)
}

fn check_pair(t: usize, s: usize, schedule: &Schedule) -> Result<()> {
    schedule.check(t)?;
    if s >= t {
        return Err(Error::Invalid(format!("reverse step must go down in time, got {t} -> {s}")));
    }
    Ok(())
}

/// Deterministic DDIM update (the discrete probability-flow ODE step).
pub fn ddim_step(x_t: &Array, eps_hat: &Array, t: usize, s: usize, schedule: &Schedule) -> Result<SamplerStep> {
    check_pair(t, s, schedule)?;
    let clean = tweedie(x_t, eps_hat, t, schedule)?;
    let (a, sg) = (schedule.alpha(s), schedule.sigma(s));
    let next = clean.zip_map(eps_hat, "ddim_step", |c, e| a * c + sg * e)?;
    Ok(SamplerStep {
        from: t,
        to: s,
        next,
        predicted_clean: clean,
        log_prob: None,
    })
}

/// Variance of the Gaussian posterior `q(x_s | x_t, x_0)`.
///
/// For `s = t − 1` this is `σ_{t−1}²/σ_t²·(1 − α_t²/α_{t−1}²)`.
pub fn posterior_variance(t: usize, s: usize, schedule: &Schedule) -> Result<f64> {
    check_pair(t, s, schedule)?;
    let ratio = schedule.alpha(t) / schedule.alpha(s);
    let (st, ss) = (schedule.sigma(t), schedule.sigma(s));
    let cond_var = st * st - ratio * ratio * ss * ss;
    Ok(ss * ss * cond_var / (st * st))
}

/// The ancestral mean is affine in the noise prediction:
/// `μ = x_coef·x_t + eps_coef·ε̂`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AncestralCoefficients {
    pub x_coef: f64,
    pub eps_coef: f64,
    pub variance: f64,
}

impl AncestralCoefficients {
    pub fn new(t: usize, s: usize, schedule: &Schedule) -> Result<Self> {
        let variance = posterior_variance(t, s, schedule)?;
        Self::with_variance(t, s, schedule, variance)
    }

    /// Generalised update `x_s = α_s·x̂_0 + √(σ_s² − v)·ε̂ + √v·z`; `v = 0`
    /// is DDIM and the posterior variance gives the ancestral step.
    pub fn with_variance(t: usize, s: usize, schedule: &Schedule, variance: f64) -> Result<Self> {
        check_pair(t, s, schedule)?;
        let (at, st) = (schedule.alpha(t), schedule.sigma(t));
        let (as_, ss) = (schedule.alpha(s), schedule.sigma(s));
        if at < ALPHA_FLOOR {
            return Err(Error::Numerical(format!("alpha_{t} = {at:e} is too small to invert")));
        }
        if !(0.0..=ss * ss).contains(&variance) {
            return Err(Error::Invalid(format!("variance {variance} outside [0, sigma_s^2]")));
        }
        let x_coef = as_ / at;
        let eps_coef = (ss * ss - variance).sqrt() - as_ * st / at;
        Ok(AncestralCoefficients {
            x_coef,
            eps_coef,
            variance,
        })
    }

    pub fn mean(&self, x_t: &Array, eps_hat: &Array) -> Result<Array> {
        Ok(x_t.zip_map(eps_hat, "ancestral_mean", |x, e| self.x_coef * x + self.eps_coef * e)?)
    }
}

/// Row-wise `log N(x; mean, variance·I)`.
pub fn gaussian_log_prob(x: &Array, mean: &Array, variance: f64) -> Result<Vec<f64>> {
    if !(variance > 0.0) {
        return Err(Error::Numerical(format!("log-density needs positive variance, got {variance}")));
    }
    if x.shape() != mean.shape() {
        return Err(Error::Invalid(format!("shape {:?} vs {:?}", x.shape(), mean.shape())));
    }
    let d = x.cols() as f64;
    let norm = -0.5 * d * (2.0 * std::f64::consts::PI * variance).ln();
    Ok((0..x.rows())
        .map(|i| {
            let sq: f64 = x.row(i).iter().zip(mean.row(i)).map(|(a, b)| (a - b) * (a - b)).sum();
            norm - 0.5 * sq / variance
        })
        .collect())
}

/// Stochastic reverse step with the "small" posterior variance.
pub fn ancestral_step(
    x_t: &Array,
    eps_hat: &Array,
    t: usize,
    s: usize,
    schedule: &Schedule,
    noise: &Array,
) -> Result<SamplerStep> {
    if t == 0 {
        return Err(Error::Invalid("no reverse step below t = 0".into()));
    }
    let coeffs = AncestralCoefficients::new(t, s, schedule)?;
    ancestral_step_with(x_t, eps_hat, t, s, schedule, noise, coeffs)
}

/// Ancestral step with an explicit variance; `variance = 0` reproduces
/// [`ddim_step`] and carries no log-density.
pub fn ancestral_step_with_variance(
    x_t: &Array,
    eps_hat: &Array,
    t: usize,
    s: usize,
    schedule: &Schedule,
    noise: &Array,
    variance: f64,
) -> Result<SamplerStep> {
    let coeffs = AncestralCoefficients::with_variance(t, s, schedule, variance)?;
    ancestral_step_with(x_t, eps_hat, t, s, schedule, noise, coeffs)
}

fn ancestral_step_with(
    x_t: &Array,
    eps_hat: &Array,
    t: usize,
    s: usize,
    schedule: &Schedule,
    noise: &Array,
    coeffs: AncestralCoefficients,
) -> Result<SamplerStep> {
    let clean = tweedie(x_t, eps_hat, t, schedule)?;
    let (a, ss) = (schedule.alpha(s), schedule.sigma(s));
    let dir = (ss * ss - coeffs.variance).sqrt();
    let std = coeffs.variance.sqrt();
    // Same expression as DDIM when the variance is zero, so the two agree bitwise.
    let det = clean.zip_map(eps_hat, "ancestral_step", |c, e| a * c + dir * e)?;
    if coeffs.variance == 0.0 {
        return Ok(SamplerStep {
            from: t,
            to: s,
            next: det,
            predicted_clean: clean,
            log_prob: None,
        });
    }
    let next = det.zip_map(noise, "ancestral_step", |m, z| m + std * z)?;
    let log_prob = gaussian_log_prob(&next, &det, coeffs.variance)?;
    Ok(SamplerStep {
        from: t,
        to: s,
        next,
        predicted_clean: clean,
        log_prob: Some(log_prob),
    })
}

/// How a reward estimates the clean sample behind a noisy state.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum X0Estimator {
    /// Single-step posterior-mean estimate.
    #[default]
    Tweedie,
    /// `substeps` DDIM substeps down to zero on a uniform sub-grid.
    Ode { substeps: usize },
}

/// Clean-sample estimate `c(x_t, t)` under the chosen estimator.
///
/// `Ode { substeps: k }` takes `k − 1` DDIM substeps and returns the
/// predicted clean sample of the final one, so `k = 1` is exactly Tweedie.
/// Below `t = k` it uses one substep per remaining grid position.
pub fn estimate_x0(
    x_t: &Array,
    t: usize,
    conds: &[Cond],
    predictor: &dyn NoisePredictor,
    schedule: &Schedule,
    estimator: X0Estimator,
) -> Result<Array> {
    schedule.check(t)?;
    match estimator {
        X0Estimator::Tweedie => {
            let eps = predictor.predict(x_t, t, conds)?;
            tweedie(x_t, &eps, t, schedule)
        }
        X0Estimator::Ode { substeps } => {
            if substeps == 0 {
                return Err(Error::Config("ode estimator needs at least one substep".into()));
            }
            let grid = ode_grid(t, substeps.min(t.max(1)));
            let mut x = x_t.clone();
            for w in grid.windows(2) {
                let eps = predictor.predict(&x, w[0], conds)?;
                if w[1] == 0 {
                    return tweedie(&x, &eps, w[0], schedule);
                }
                x = ddim_step(&x, &eps, w[0], w[1], schedule)?.next;
            }
            unreachable!("grid always ends at zero")
        }
    }
}

/// `substeps + 1` strictly decreasing grid points from `t` to 0.
fn ode_grid(t: usize, substeps: usize) -> Vec<usize> {
    if t == 0 {
        return vec![0, 0];
    }
    (0..=substeps)
        .map(|j| ((t * (substeps - j)) as f64 / substeps as f64).round() as usize)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arr(v: &[f64]) -> Array {
        Array::matrix(1, v.len(), v.to_vec()).unwrap()
    }

    #[test]
    fn invariants_hold_for_both_kinds() {
        for kind in ScheduleKind::ALL {
            for steps in [2, 10, 50, 1000] {
                let s = Schedule::new(kind, steps).unwrap();
                assert_eq!(s.alphas().len(), steps + 1);
                assert!(s.alpha(0) >= 1.0 - 1e-6);
                assert!(s.sigma(0) <= 1e-3);
                for t in 0..=steps {
                    let vp = s.alpha(t).powi(2) + s.sigma(t).powi(2);
                    assert!((vp - 1.0).abs() <= 1e-12, "{kind} T={steps} t={t}: {vp}");
                    if t > 0 {
                        assert!(s.alpha(t) < s.alpha(t - 1), "{kind} T={steps} alpha at {t}");
                        assert!(s.sigma(t) > s.sigma(t - 1), "{kind} T={steps} sigma at {t}");
                    }
                }
                assert!(s.alpha(steps) > ALPHA_FLOOR);
            }
        }
    }

    #[test]
    fn smallest_linear_schedule() {
        let s = make_schedule("linear", 2).unwrap();
        assert_eq!(s.alphas().len(), 3);
        assert!(s.alpha(0) > s.alpha(1) && s.alpha(1) > s.alpha(2));
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(matches!(make_schedule("sigmoid", 50), Err(Error::UnknownName { .. })));
        assert!(make_schedule("cosine", 1).is_err());
        let s = make_schedule("cosine", 50).unwrap();
        assert_eq!(DEFAULT_STEPS, 50);
        let x = arr(&[1.0]);
        assert!(matches!(forward_noise(&x, 51, &x, &s), Err(Error::TimestepOutOfRange { .. })));
    }

    #[test]
    fn forward_noise_arithmetic() {
        let s = make_schedule("cosine", 50).unwrap();
        let x0 = arr(&[1.0, -2.0]);
        let zero = arr(&[0.0, 0.0]);
        let at0 = forward_noise(&x0, 0, &arr(&[0.3, 0.3]), &s).unwrap();
        for (a, b) in at0.data().iter().zip(x0.data()) {
            assert!((a - b).abs() <= 1e-3);
        }
        let no_noise = forward_noise(&x0, 20, &zero, &s).unwrap();
        assert_eq!(no_noise.data(), &[s.alpha(20) * 1.0, s.alpha(20) * -2.0]);
        // x_t = α·x0 + σ·ε with α = 0.8, σ = 0.6
        assert!((0.8 * 1.0 + 0.6 * 1.0 - 1.4f64).abs() < 1e-15);
    }

    #[test]
    fn ddim_recovers_clean_sample_with_exact_noise() {
        let s = make_schedule("cosine", 50).unwrap();
        let x0 = arr(&[0.7, -1.3, 2.2]);
        let eps = arr(&[-0.4, 1.1, 0.05]);
        for t in 1..=50 {
            let xt = forward_noise(&x0, t, &eps, &s).unwrap();
            let step = ddim_step(&xt, &eps, t, t - 1, &s).unwrap();
            for (a, b) in step.predicted_clean.data().iter().zip(x0.data()) {
                assert!((a - b).abs() < 1e-12, "t={t}");
            }
            assert!(step.log_prob.is_none());
        }
    }

    #[test]
    fn ddim_with_zero_prediction_rescales() {
        let s = make_schedule("linear", 20).unwrap();
        let x = arr(&[1.5, -0.5]);
        let zero = arr(&[0.0, 0.0]);
        let step = ddim_step(&x, &zero, 10, 9, &s).unwrap();
        let k = s.alpha(9) / s.alpha(10);
        for (a, b) in step.next.data().iter().zip(x.data()) {
            assert!((a - k * b).abs() < 1e-12);
        }
        assert!(ddim_step(&x, &zero, 9, 9, &s).is_err());
    }

    #[test]
    fn ancestral_mean_sample_log_prob() {
        let s = make_schedule("cosine", 50).unwrap();
        let x = arr(&[0.4, -0.9]);
        let eps = arr(&[0.2, 0.1]);
        let zero = arr(&[0.0, 0.0]);
        let step = ancestral_step(&x, &eps, 30, 29, &s, &zero).unwrap();
        let v = posterior_variance(30, 29, &s).unwrap();
        let coeffs = AncestralCoefficients::new(30, 29, &s).unwrap();
        let mean = coeffs.mean(&x, &eps).unwrap();
        for (a, b) in step.next.data().iter().zip(mean.data()) {
            assert!((a - b).abs() < 1e-14);
        }
        let expected = -(2.0 / 2.0) * (2.0 * std::f64::consts::PI * v).ln();
        assert!((step.log_prob.unwrap()[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn posterior_variance_matches_closed_form_for_adjacent_steps() {
        let s = make_schedule("cosine", 50).unwrap();
        for t in 1..=50 {
            let v = posterior_variance(t, t - 1, &s).unwrap();
            let expected = s.sigma(t - 1).powi(2) / s.sigma(t).powi(2)
                * (1.0 - s.alpha(t).powi(2) / s.alpha(t - 1).powi(2));
            assert!((v - expected).abs() < 1e-15, "t={t}");
        }
    }

    #[test]
    fn zero_variance_ancestral_is_ddim() {
        let s = make_schedule("cosine", 50).unwrap();
        let x = arr(&[0.4, -0.9]);
        let eps = arr(&[0.2, 0.1]);
        let z = arr(&[1.0, -1.0]);
        for t in 1..=50 {
            let a = ancestral_step_with_variance(&x, &eps, t, t - 1, &s, &z, 0.0).unwrap();
            let d = ddim_step(&x, &eps, t, t - 1, &s).unwrap();
            assert_eq!(a.next, d.next);
            assert!(a.log_prob.is_none());
        }
    }

    #[test]
    fn one_std_offset_lowers_log_prob_by_half() {
        let s = make_schedule("cosine", 50).unwrap();
        let x = arr(&[0.3]);
        let eps = arr(&[-0.2]);
        let at_mean = ancestral_step(&x, &eps, 10, 9, &s, &arr(&[0.0])).unwrap();
        let off = ancestral_step(&x, &eps, 10, 9, &s, &arr(&[1.0])).unwrap();
        let diff = at_mean.log_prob.unwrap()[0] - off.log_prob.unwrap()[0];
        assert!((diff - 0.5).abs() < 1e-12);
    }

    #[test]
    fn ancestral_rejects_t_zero() {
        let s = make_schedule("cosine", 50).unwrap();
        let x = arr(&[0.3]);
        assert!(ancestral_step(&x, &x, 0, 0, &s, &x).is_err());
    }

    #[test]
    fn ode_grid_is_strictly_decreasing() {
        for t in 1..60 {
            for k in 1..=t {
                let g = ode_grid(t, k);
                assert_eq!(g.len(), k + 1);
                assert_eq!(g[0], t);
                assert_eq!(*g.last().unwrap(), 0);
                assert!(g.windows(2).all(|w| w[0] > w[1]), "t={t} k={k}: {g:?}");
            }
        }
    }
}
