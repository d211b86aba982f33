//! Short reverse rollouts from noised data, their path-summed rewards, and
//! best/worst selection among candidates.

use std::io::Write;

use gradkit::{Array, LrSchedule};
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rewards::StateReward;
use crate::rng::{randn, seeded};
use crate::samplers::Sampler;
use crate::schedules::{forward_noise, Cond, NoisePredictor, Schedule, X0Estimator};

/// How the reward-gap term enters the preference loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum RewardModulation {
    #[default]
    Inside,
    Off,
}

/// Hyperparameters shared by the fine-tuning trainers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Registered trainer name.
    pub kind: String,
    /// Candidates per example.
    pub n: usize,
    /// Reverse steps per rollout.
    pub m: usize,
    /// Inclusive start-timestep range; defaults to `m..=T−1`.
    pub t_min: Option<usize>,
    pub t_max: Option<usize>,
    pub lr: f64,
    pub lr_schedule: LrSchedule,
    /// Rate of a running weight average used for evaluation and the saved
    /// checkpoint; `None` uses the trained weights directly.
    pub weight_ema: Option<f64>,
    pub beta: f64,
    pub lambda: f64,
    pub reward_modulation: RewardModulation,
    pub guidance_scale: f64,
    pub estimator: X0Estimator,
    pub sft_sampler: String,
    pub rlhf_sampler: String,
    /// Constant timestep weight of the ε-regression losses.
    pub omega: f64,
    /// Copy the policy into the reference every this many steps; 0 freezes it.
    pub reference_refresh: usize,
    /// Feed dataset labels as conditions; otherwise `condition` is used.
    pub use_labels: bool,
    pub condition: Cond,
    /// Null-condition drop rate, used by the pretraining trainer only.
    pub null_drop_prob: f64,
    pub seed: u64,
    pub batch_size: usize,
    pub steps: usize,
    /// Smoothing factor of the exponential loss average.
    pub ema: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            kind: "rlhf".into(),
            n: 3,
            m: 3,
            t_min: None,
            t_max: None,
            lr: 1e-4,
            lr_schedule: LrSchedule::Constant,
            weight_ema: None,
            beta: 0.1,
            lambda: 1.0,
            reward_modulation: RewardModulation::Inside,
            guidance_scale: 5.0,
            estimator: X0Estimator::Tweedie,
            sft_sampler: "ddim".into(),
            rlhf_sampler: "ancestral".into(),
            omega: 1.0,
            reference_refresh: 0,
            use_labels: false,
            condition: None,
            null_drop_prob: 0.1,
            seed: 0,
            batch_size: 32,
            steps: 1000,
            ema: 0.02,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, schedule: &Schedule) -> Result<()> {
        if self.n == 0 || self.m == 0 {
            return Err(Error::Config(format!("n and m must be >= 1, got n={} m={}", self.n, self.m)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.guidance_scale >= 0.0) || !(self.beta > 0.0) || !(self.lambda >= 0.0) {
            return Err(Error::Config("guidance_scale and lambda must be >= 0 and beta > 0".into()));
        }
        self.timestep_range(self.m, schedule).map(|_| ())
    }

    /// Inclusive range of start timesteps leaving room for `m` steps.
    pub fn timestep_range(&self, m: usize, schedule: &Schedule) -> Result<(usize, usize)> {
        let lo = self.t_min.unwrap_or(m);
        let hi = self.t_max.unwrap_or(schedule.steps() - 1);
        if lo < m || lo > hi || hi > schedule.steps() {
            return Err(Error::Config(format!(
                "timestep range [{lo}, {hi}] must lie in [{m}, {}] to fit {m} reverse steps",
                schedule.steps()
            )));
        }
        Ok((lo, hi))
    }

    /// Reward-gap weight after the modulation switch.
    pub fn effective_lambda(&self) -> f64 {
        match self.reward_modulation {
            RewardModulation::Inside => self.lambda,
            RewardModulation::Off => 0.0,
        }
    }
}

/// An `m`-step rollout from a forward-noised clean sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub t: usize,
    pub cond: Cond,
    /// Seeds the starting noise and every sampler draw.
    pub seed: u64,
    pub start: Vec<f64>,
    /// Timestep of each visited state, strictly decreasing below `t`.
    pub timesteps: Vec<usize>,
    pub states: Vec<Vec<f64>>,
    pub rewards: Vec<f64>,
    /// Transition log-densities; present for stochastic samplers only.
    pub log_probs: Option<Vec<f64>>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// `(input state, its timestep, resulting state)` for every step.
    pub fn transitions(&self) -> impl Iterator<Item = (&[f64], usize, &[f64])> {
        (0..self.len()).map(move |k| {
            let (input, t) = if k == 0 {
                (self.start.as_slice(), self.t)
            } else {
                (self.states[k - 1].as_slice(), self.timesteps[k - 1])
            };
            (input, t, self.states[k].as_slice())
        })
    }
}

/// One example to roll out: clean start, condition, timestep and one seed
/// per candidate.
#[derive(Clone, Debug)]
pub struct RolloutRequest<'a> {
    pub x0: &'a [f64],
    pub cond: Cond,
    pub t: usize,
    pub seeds: Vec<u64>,
}

fn row(x: &[f64]) -> Result<Array> {
    Ok(Array::matrix(1, x.len(), x.to_vec())?)
}

/// Rolls out every candidate of every request, batching network calls
/// across all of them. Returns one candidate list per request.
pub fn rollout(
    requests: &[RolloutRequest<'_>],
    m: usize,
    sampler: &dyn Sampler,
    predictor: &dyn NoisePredictor,
    schedule: &Schedule,
    reward: &StateReward,
) -> Result<Vec<Vec<Trajectory>>> {
    if m == 0 {
        return Err(Error::Config("rollouts need m >= 1".into()));
    }
    let dim = requests.first().map_or(0, |r| r.x0.len());
    let mut owners = Vec::new();
    let mut rngs = Vec::new();
    let mut ts = Vec::new();
    let mut conds = Vec::new();
    let mut starts = Vec::new();
    for (e, req) in requests.iter().enumerate() {
        if req.seeds.is_empty() {
            return Err(Error::Config("each example needs at least one candidate".into()));
        }
        if req.t < m || req.t > schedule.steps() {
            return Err(Error::Config(format!("start timestep {} cannot fit {m} steps", req.t)));
        }
        if req.x0.len() != dim {
            return Err(Error::Invalid("rollout rows differ in dimension".into()));
        }
        let x0 = row(req.x0)?;
        for &seed in &req.seeds {
            let mut rng = seeded(seed);
            let eps = randn(&mut rng, 1, dim);
            starts.push(forward_noise(&x0, req.t, &eps, schedule)?.into_data());
            owners.push((e, seed));
            rngs.push(rng);
            ts.push(req.t);
            conds.push(req.cond);
        }
    }
    let rows = owners.len();
    if rows == 0 {
        return Ok(Vec::new());
    }
    let tweedie = reward.estimator == X0Estimator::Tweedie;
    let mut x = Array::matrix(rows, dim, starts.concat())?;
    let mut states = vec![Vec::with_capacity(m); rows];
    let mut log_probs = vec![Vec::with_capacity(m); rows];
    let mut clean = Vec::with_capacity(m);
    for k in 0..=m {
        let eps = predictor.predict_rows(&x, &ts, &conds)?;
        if k > 0 && tweedie {
            let mut est = Vec::with_capacity(rows * dim);
            for r in 0..rows {
                let xr = row(x.row(r))?;
                let er = row(eps.row(r))?;
                est.extend(crate::schedules::tweedie(&xr, &er, ts[r], schedule)?.into_data());
            }
            clean.push(Array::matrix(rows, dim, est)?);
        }
        if k == m {
            break;
        }
        let mut next = Vec::with_capacity(rows * dim);
        for r in 0..rows {
            let xr = row(x.row(r))?;
            let er = row(eps.row(r))?;
            let noise = if sampler.is_stochastic() {
                randn(&mut rngs[r], 1, dim)
            } else {
                Array::zeros(&[1, dim])?
            };
            let step = sampler.step_with_noise(&xr, &er, ts[r], ts[r] - 1, schedule, &noise)?;
            if let Some(lp) = step.log_prob {
                if !lp[0].is_finite() {
                    return Err(Error::Numerical(format!("non-finite transition log-density at t={}", ts[r])));
                }
                log_probs[r].push(lp[0]);
            }
            states[r].push(step.next.data().to_vec());
            next.extend_from_slice(step.next.data());
        }
        x = Array::matrix(rows, dim, next)?;
        for t in ts.iter_mut() {
            *t -= 1;
        }
    }
    let mut rewards = vec![Vec::with_capacity(m); rows];
    for k in 0..m {
        let scores = if tweedie {
            reward.clean(&clean[k], &conds)?
        } else {
            let mut s = Vec::with_capacity(rows);
            for r in 0..rows {
                let t = requests[owners[r].0].t - k - 1;
                s.extend(reward.state(&row(&states[r][k])?, t, &conds[r..=r], predictor, schedule)?);
            }
            s
        };
        for (r, v) in scores.into_iter().enumerate() {
            rewards[r].push(v);
        }
    }
    let mut out: Vec<Vec<Trajectory>> = requests.iter().map(|r| Vec::with_capacity(r.seeds.len())).collect();
    for (r, ((e, seed), (st, (rw, lp)))) in owners
        .into_iter()
        .zip(states.into_iter().zip(rewards.into_iter().zip(log_probs)))
        .enumerate()
    {
        let t = requests[e].t;
        out[e].push(Trajectory {
            t,
            cond: requests[e].cond,
            seed,
            start: starts[r].clone(),
            timesteps: (1..=m).map(|k| t - k).collect(),
            states: st,
            rewards: rw,
            log_probs: sampler.is_stochastic().then_some(lp),
        });
    }
    Ok(out)
}

/// `n` candidate rollouts of `m` steps from `x0` noised to timestep `t`.
/// Per-candidate seeds are drawn from `rng`, so each trajectory can be
/// replayed on its own with [`replay`].
#[allow(clippy::too_many_arguments)]
pub fn sample_trajectories(
    x0: &[f64],
    cond: Cond,
    t: usize,
    n: usize,
    m: usize,
    sampler: &dyn Sampler,
    predictor: &dyn NoisePredictor,
    schedule: &Schedule,
    reward: &StateReward,
    rng: &mut dyn RngCore,
) -> Result<Vec<Trajectory>> {
    if n == 0 {
        return Err(Error::Config("need at least one candidate".into()));
    }
    let seeds = (0..n).map(|_| rng.next_u64()).collect();
    let req = RolloutRequest { x0, cond, t, seeds };
    Ok(rollout(&[req], m, sampler, predictor, schedule, reward)?.remove(0))
}

/// Re-runs a recorded trajectory from its seed.
pub fn replay(
    traj: &Trajectory,
    x0: &[f64],
    sampler: &dyn Sampler,
    predictor: &dyn NoisePredictor,
    schedule: &Schedule,
    reward: &StateReward,
) -> Result<Trajectory> {
    let req = RolloutRequest {
        x0,
        cond: traj.cond,
        t: traj.t,
        seeds: vec![traj.seed],
    };
    Ok(rollout(&[req], traj.len(), sampler, predictor, schedule, reward)?.remove(0).remove(0))
}

/// Draws a start timestep and `n` candidate seeds for one example.
pub fn draw_example(rng: &mut dyn RngCore, range: (usize, usize), n: usize) -> (usize, Vec<u64>) {
    let t = rng.gen_range(range.0..=range.1);
    (t, (0..n).map(|_| rng.next_u64()).collect())
}

/// Plain sum of the step rewards.
pub fn aggregate_reward(traj: &Trajectory) -> Result<f64> {
    if traj.rewards.is_empty() {
        return Err(Error::Invalid("trajectory has no rewards".into()));
    }
    Ok(traj.rewards.iter().sum())
}

pub fn aggregates(trajs: &[Trajectory]) -> Result<Vec<f64>> {
    trajs.iter().map(aggregate_reward).collect()
}

/// Index of the largest aggregate; ties go to the lowest index.
pub fn select_best(aggregates: &[f64]) -> Result<usize> {
    if aggregates.is_empty() {
        return Err(Error::Invalid("selection needs at least one trajectory".into()));
    }
    if aggregates.iter().any(|a| a.is_nan()) {
        return Err(Error::Numerical("NaN aggregate reward".into()));
    }
    Ok((1..aggregates.len()).fold(0, |b, i| if aggregates[i] > aggregates[b] { i } else { b }))
}

/// Best and worst indices. The worst is the lowest index attaining the
/// minimum among indices other than the best, so the two always differ.
pub fn select_best_worst(aggregates: &[f64]) -> Result<(usize, usize)> {
    if aggregates.len() < 2 {
        return Err(Error::Invalid(format!(
            "best/worst selection needs at least two trajectories, got {}",
            aggregates.len()
        )));
    }
    let best = select_best(aggregates)?;
    let worst = (0..aggregates.len())
        .filter(|&i| i != best)
        .fold(None, |w: Option<usize>, i| match w {
            Some(j) if aggregates[j] <= aggregates[i] => Some(j),
            _ => Some(i),
        })
        .expect("at least one other index");
    Ok((best, worst))
}

#[derive(Clone, Debug, PartialEq)]
pub struct PreferencePair {
    pub winner: Trajectory,
    pub loser: Trajectory,
    pub gap: f64,
}

impl PreferencePair {
    pub fn from_candidates(trajs: &[Trajectory]) -> Result<Self> {
        let aggs = aggregates(trajs)?;
        let (w, l) = select_best_worst(&aggs)?;
        Ok(PreferencePair {
            winner: trajs[w].clone(),
            loser: trajs[l].clone(),
            gap: aggs[w] - aggs[l],
        })
    }
}

/// One line of the trajectory dump.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub step: usize,
    pub example: usize,
    pub candidate: usize,
    pub t: usize,
    pub seed: u64,
    pub rewards: Vec<f64>,
    pub aggregate: f64,
    pub best: bool,
    pub worst: bool,
}

/// Candidates of one example and which of them were selected.
#[derive(Clone, Debug, PartialEq)]
pub struct CandidateGroup {
    pub trajectories: Vec<Trajectory>,
    pub aggregates: Vec<f64>,
    pub best: usize,
    pub worst: Option<usize>,
}

impl CandidateGroup {
    pub fn new(trajectories: Vec<Trajectory>, pick_worst: bool) -> Result<Self> {
        let aggregates = aggregates(&trajectories)?;
        let (best, worst) = if pick_worst {
            let (b, w) = select_best_worst(&aggregates)?;
            (b, Some(w))
        } else {
            (select_best(&aggregates)?, None)
        };
        Ok(CandidateGroup {
            trajectories,
            aggregates,
            best,
            worst,
        })
    }

    /// Population standard deviation of the candidate aggregates.
    pub fn spread(&self) -> f64 {
        let n = self.aggregates.len() as f64;
        let mean = self.aggregates.iter().sum::<f64>() / n;
        (self.aggregates.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n).sqrt()
    }

    pub fn records(&self, step: usize, example: usize) -> Vec<TrajectoryRecord> {
        self.trajectories
            .iter()
            .enumerate()
            .map(|(i, tr)| TrajectoryRecord {
                step,
                example,
                candidate: i,
                t: tr.t,
                seed: tr.seed,
                rewards: tr.rewards.clone(),
                aggregate: self.aggregates[i],
                best: i == self.best,
                worst: Some(i) == self.worst,
            })
            .collect()
    }
}

pub fn write_jsonl<W: Write>(mut w: W, records: &[TrajectoryRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io("<trajectory dump>", e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn traj(rewards: Vec<f64>) -> Trajectory {
        Trajectory {
            t: rewards.len(),
            cond: None,
            seed: 0,
            start: vec![0.0],
            timesteps: (0..rewards.len()).rev().collect(),
            states: vec![vec![0.0]; rewards.len()],
            rewards,
            log_probs: None,
        }
    }

    #[test]
    fn aggregation_is_a_plain_sum() {
        assert_eq!(aggregate_reward(&traj(vec![1.0, 2.0, 3.0])).unwrap(), 6.0);
        assert_eq!(aggregate_reward(&traj(vec![0.5; 4])).unwrap(), 2.0);
        assert!(aggregate_reward(&traj(vec![])).is_err());
    }

    #[test]
    fn selection_and_ties() {
        assert_eq!(select_best_worst(&[1.0, 3.0, 2.0]).unwrap(), (1, 0));
        assert_eq!(select_best_worst(&[2.0, 2.0, 2.0]).unwrap(), (0, 1));
        assert_eq!(select_best_worst(&[2.5, 7.5, 5.0]).unwrap(), (1, 0));
        assert_eq!(select_best(&[4.0]).unwrap(), 0);
        assert!(select_best(&[]).is_err());
        assert!(select_best_worst(&[1.0]).is_err());
    }

    #[test]
    fn preference_pair_gap() {
        let p = PreferencePair::from_candidates(&[traj(vec![1.0]), traj(vec![4.0]), traj(vec![-1.0])]).unwrap();
        assert_eq!(p.gap, 5.0);
        assert_eq!(p.winner.rewards, vec![4.0]);
    }

    #[test]
    fn config_range_checks() {
        let s = crate::schedules::make_schedule("cosine", 50).unwrap();
        let cfg = TrainConfig::default();
        assert_eq!(cfg.timestep_range(3, &s).unwrap(), (3, 49));
        let bad = TrainConfig {
            t_min: Some(2),
            ..TrainConfig::default()
        };
        assert!(bad.validate(&s).is_err());
        let json = r#"{"n": 4, "typo": 1}"#;
        assert!(serde_json::from_str::<TrainConfig>(json).is_err());
    }
}
