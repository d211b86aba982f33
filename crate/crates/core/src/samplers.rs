//! Reverse samplers behind a common trait, looked up by name.

use std::collections::BTreeMap;

use gradkit::Array;
use once_cell::sync::Lazy;
use rand::RngCore;

use crate::error::{Error, Result};
use crate::rng::randn;
use crate::schedules::{ancestral_step, ddim_step, Cond, NoisePredictor, SamplerStep, Schedule};

pub trait Sampler: Send + Sync {
    fn name(&self) -> &'static str;

    /// Whether steps consume noise (and therefore carry log-densities).
    fn is_stochastic(&self) -> bool;

    /// One reverse step with caller-supplied noise; deterministic samplers
    /// ignore `noise`.
    fn step_with_noise(&self, x_t: &Array, eps_hat: &Array, t: usize, s: usize, schedule: &Schedule, noise: &Array) -> Result<SamplerStep>;

    fn step(
        &self,
        x_t: &Array,
        eps_hat: &Array,
        t: usize,
        s: usize,
        schedule: &Schedule,
        rng: &mut dyn RngCore,
    ) -> Result<SamplerStep> {
        let noise = if self.is_stochastic() {
            randn(rng, x_t.rows(), x_t.cols())
        } else {
            Array::zeros(x_t.shape())?
        };
        self.step_with_noise(x_t, eps_hat, t, s, schedule, &noise)
    }
}

#[derive(Debug, Default, Clone, Copy)]
pub struct Ddim;

impl Sampler for Ddim {
    fn name(&self) -> &'static str {
        "ddim"
    }

    fn is_stochastic(&self) -> bool {
        false
    }

    fn step_with_noise(&self, x_t: &Array, eps_hat: &Array, t: usize, s: usize, schedule: &Schedule, _noise: &Array) -> Result<SamplerStep> {
        ddim_step(x_t, eps_hat, t, s, schedule)
    }
}

#[derive(Debug, Default, Clone, Copy)]
pub struct Ancestral;

impl Sampler for Ancestral {
    fn name(&self) -> &'static str {
        "ancestral"
    }

    fn is_stochastic(&self) -> bool {
        true
    }

    fn step_with_noise(&self, x_t: &Array, eps_hat: &Array, t: usize, s: usize, schedule: &Schedule, noise: &Array) -> Result<SamplerStep> {
        ancestral_step(x_t, eps_hat, t, s, schedule, noise)
    }
}

type SamplerCtor = fn() -> Box<dyn Sampler>;

static SAMPLERS: Lazy<BTreeMap<&'static str, SamplerCtor>> = Lazy::new(|| {
    let mut map: BTreeMap<&'static str, SamplerCtor> = BTreeMap::new();
    map.insert("ddim", || Box::new(Ddim));
    map.insert("ancestral", || Box::new(Ancestral));
    map
});

pub fn sampler_names() -> Vec<&'static str> {
    SAMPLERS.keys().copied().collect()
}

pub fn sampler(name: &str) -> Result<Box<dyn Sampler>> {
    SAMPLERS.get(name).map(|ctor| ctor()).ok_or_else(|| Error::UnknownName {
        what: "sampler",
        name: name.to_string(),
        known: sampler_names().join(", "),
    })
}

/// Runs the full deterministic chain `T → 0` from `x_T`, one DDIM step per
/// grid point. Returns the final state and the network evaluations spent on
/// each row.
pub fn ddim_chain(predictor: &dyn NoisePredictor, schedule: &Schedule, x_start: Array, conds: &[Cond]) -> Result<(Array, Vec<u64>)> {
    let mut x = x_start;
    let mut nfe = vec![0u64; conds.len()];
    for t in (1..=schedule.steps()).rev() {
        let eps = predictor.predict(&x, t, conds)?;
        for (n, &c) in nfe.iter_mut().zip(conds) {
            *n += predictor.evals_per_row(c);
        }
        x = ddim_step(&x, &eps, t, t - 1, schedule)?.next;
    }
    Ok((x, nfe))
}

/// Runs the full chain `T → 0` with any sampler; stochastic samplers draw
/// their noise from `rng`. Returns the final state and per-row evaluations.
pub fn sample_chain(
    smp: &dyn Sampler,
    predictor: &dyn NoisePredictor,
    schedule: &Schedule,
    x_start: Array,
    conds: &[Cond],
    rng: &mut dyn RngCore,
) -> Result<(Array, Vec<u64>)> {
    let mut x = x_start;
    let mut nfe = vec![0u64; conds.len()];
    for t in (1..=schedule.steps()).rev() {
        let eps = predictor.predict(&x, t, conds)?;
        for (n, &c) in nfe.iter_mut().zip(conds) {
            *n += predictor.evals_per_row(c);
        }
        x = smp.step(&x, &eps, t, t - 1, schedule, rng)?.next;
    }
    Ok((x, nfe))
}
