//! Inference-time search with network-evaluation accounting. The
//! fine-tuning baselines live in [`crate::trainers`].

use std::ops::AddAssign;

use gradkit::Array;
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rewards::StateReward;
use crate::rng::randn;
use crate::samplers::{sample_chain, Sampler};
use crate::schedules::{Cond, NoisePredictor, Schedule};
use crate::trajectory::select_best;

/// Denoiser evaluations spent on one sample, by phase.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NfeLedger {
    pub generation: u64,
    pub reward_estimation: u64,
    pub search: u64,
}

impl NfeLedger {
    pub fn total(&self) -> u64 {
        self.generation + self.reward_estimation + self.search
    }
}

impl AddAssign for NfeLedger {
    fn add_assign(&mut self, o: Self) {
        self.generation += o.generation;
        self.reward_estimation += o.reward_estimation;
        self.search += o.search;
    }
}

/// Evaluations of one plain `T`-step sample for condition `c`.
pub fn sampling_nfe(predictor: &dyn NoisePredictor, schedule: &Schedule, c: Cond) -> u64 {
    schedule.steps() as u64 * predictor.evals_per_row(c)
}

/// Plain samples from fresh noise, one per prompt.
pub fn generate(
    predictor: &dyn NoisePredictor,
    smp: &dyn Sampler,
    schedule: &Schedule,
    prompts: &[Cond],
    dim: usize,
    rng: &mut dyn RngCore,
) -> Result<(Array, Vec<NfeLedger>)> {
    if prompts.is_empty() {
        return Err(Error::Invalid("no prompts to sample".into()));
    }
    let noise = randn(rng, prompts.len(), dim);
    let (x, nfe) = sample_chain(smp, predictor, schedule, noise, prompts, rng)?;
    let ledgers = nfe
        .into_iter()
        .map(|g| NfeLedger {
            generation: g,
            ..NfeLedger::default()
        })
        .collect();
    Ok((x, ledgers))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchResult {
    /// Chosen standardized sample.
    pub sample: Vec<f64>,
    pub reward: f64,
    /// Index of the chosen candidate.
    pub chosen: usize,
    pub candidate_rewards: Vec<f64>,
    pub ledger: NfeLedger,
}

/// Best-of-`n` search per prompt: `n` full samples from independent noises,
/// each scored on its final state, the best kept. The kept sample's cost is
/// booked as generation and the discarded candidates' as search.
pub fn best_of_n_inference(
    predictor: &dyn NoisePredictor,
    smp: &dyn Sampler,
    prompts: &[Cond],
    n: usize,
    dim: usize,
    reward: &StateReward,
    schedule: &Schedule,
    rng: &mut dyn RngCore,
) -> Result<Vec<SearchResult>> {
    if n == 0 {
        return Err(Error::Config("best-of-n needs n >= 1".into()));
    }
    let expanded: Vec<Cond> = prompts.iter().flat_map(|&c| std::iter::repeat(c).take(n)).collect();
    let (x, _) = generate(predictor, smp, schedule, &expanded, dim, rng)?;
    let scores = reward.clean(&x, &expanded)?;
    prompts
        .iter()
        .enumerate()
        .map(|(p, &c)| {
            let rewards = scores[p * n..(p + 1) * n].to_vec();
            let chosen = select_best(&rewards)?;
            let per = sampling_nfe(predictor, schedule, c);
            Ok(SearchResult {
                sample: x.row(p * n + chosen).to_vec(),
                reward: rewards[chosen],
                chosen,
                candidate_rewards: rewards,
                ledger: NfeLedger {
                    generation: per,
                    reward_estimation: 0,
                    search: (n as u64 - 1) * per,
                },
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Affine;
    use crate::denoiser::{Denoiser, DenoiserConfig, Guided};
    use crate::rewards::ModeDistance;
    use crate::rng::seeded;
    use crate::samplers::Ddim;
    use crate::schedules::make_schedule;
    use std::sync::Arc;

    #[test]
    fn ledger_counts() {
        let cfg = DenoiserConfig {
            num_classes: 2,
            hidden: 8,
            layers: 1,
            ..DenoiserConfig::default()
        };
        let model = Denoiser::new(cfg, 0).unwrap();
        let schedule = make_schedule("cosine", 50).unwrap();
        let reward = StateReward::new(Arc::new(ModeDistance::new(vec![0.0, 0.0])), Affine::identity(2), Default::default());
        let guided = Guided::new(&model, 5.0);
        let r = best_of_n_inference(&guided, &Ddim, &[Some(1)], 4, 2, &reward, &schedule, &mut seeded(0)).unwrap();
        assert_eq!(r[0].ledger.total(), 400);
        let r = best_of_n_inference(&guided, &Ddim, &[None], 1, 2, &reward, &schedule, &mut seeded(0)).unwrap();
        assert_eq!(r[0].ledger.total(), 50);
        assert_eq!(r[0].ledger.search, 0);
    }
}
