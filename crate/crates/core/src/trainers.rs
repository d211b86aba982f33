//! Training objectives behind a common [`Trainer`] trait, registered by name.
//!
//! | name | update |
//! |------|--------|
//! | `pretrain` | ε-regression on forward-noised data, timesteps `1..=T`, conditions dropped at random |
//! | `standard` | ε-regression at one timestep per example, no rollouts |
//! | `sft` | regression onto the best of `n` deterministic rollouts |
//! | `rlhf` | reward-modulated preference loss on best/worst stochastic rollouts |
//! | `dpo-vanilla` | `rlhf` with `n = 2` and no reward modulation |

use std::collections::BTreeMap;

use gradkit::{AdamWConfig, Array, OptimState, Tape, Var};
use log::warn;
use once_cell::sync::Lazy;
use rand::Rng;

use crate::denoiser::{eps_loss, optimize_step, Denoiser, Guided};
use crate::error::{Error, Result};
use crate::rewards::StateReward;
use crate::rng::{randn, seeded, SeededRng};
use crate::samplers::{sample_chain, sampler};
use crate::schedules::{forward_noise, forward_noise_rows, AncestralCoefficients, Cond, Schedule};
use crate::trajectory::{draw_example, rollout, CandidateGroup, RolloutRequest, TrainConfig};

/// States whose noise level is below this give no usable ε target.
pub const MIN_TARGET_SIGMA: f64 = 1e-6;

/// Standardized clean samples and their conditions.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub x0: Array,
    pub conds: Vec<Cond>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.conds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.conds.is_empty()
    }
}

/// What one optimizer step observed.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepReport {
    pub loss: f64,
    /// Candidate groups, one per example, for trainers that roll out.
    pub groups: Vec<CandidateGroup>,
    /// Network evaluations spent generating and rolling out.
    pub nfe: u64,
}

impl StepReport {
    /// Mean aggregate reward over every candidate.
    pub fn reward_mean(&self) -> Option<f64> {
        let all: Vec<f64> = self.groups.iter().flat_map(|g| g.aggregates.iter().copied()).collect();
        (!all.is_empty()).then(|| all.iter().sum::<f64>() / all.len() as f64)
    }

    /// Mean over examples of the spread of candidate aggregates.
    pub fn reward_std(&self) -> Option<f64> {
        (!self.groups.is_empty()).then(|| self.groups.iter().map(CandidateGroup::spread).sum::<f64>() / self.groups.len() as f64)
    }

    /// Mean aggregate of the selected trajectories.
    pub fn selected_reward(&self) -> Option<f64> {
        (!self.groups.is_empty())
            .then(|| self.groups.iter().map(|g| g.aggregates[g.best]).sum::<f64>() / self.groups.len() as f64)
    }
}

pub trait Trainer: Send {
    fn name(&self) -> &'static str;

    fn step(&mut self, model: &mut Denoiser, optim: &mut OptimState, batch: &Batch, rng: &mut SeededRng) -> Result<StepReport>;

    /// Learning rate of subsequent steps.
    fn set_lr(&mut self, lr: f64);
}

/// Everything a trainer may need besides the model being trained.
#[derive(Clone)]
pub struct TrainerContext {
    pub config: TrainConfig,
    pub schedule: Schedule,
    pub reward: Option<StateReward>,
    /// Frozen copy of the policy at fine-tune start.
    pub reference: Option<Denoiser>,
}

impl TrainerContext {
    fn adam(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.config.lr,
            ..AdamWConfig::default()
        }
    }

    fn reward(&self, trainer: &str) -> Result<StateReward> {
        self.reward
            .clone()
            .ok_or_else(|| Error::Config(format!("trainer `{trainer}` needs a reward")))
    }
}

/// Single-timestep ε-regression: one start state per example, target the
/// noise that produced it. Matches `sft_sharpen_step` with `n = m = 1`.
pub fn standard_finetune_step(
    model: &mut Denoiser,
    optim: &mut OptimState,
    batch: &Batch,
    cfg: &TrainConfig,
    schedule: &Schedule,
    adam: &AdamWConfig,
    rng: &mut SeededRng,
) -> Result<f64> {
    let range = cfg.timestep_range(1, schedule)?;
    let dim = batch.x0.cols();
    let (mut xs, mut ts, mut targets) = (Vec::new(), Vec::new(), Vec::new());
    for i in 0..batch.len() {
        let (t, seeds) = draw_example(rng, range, 1);
        let x0 = Array::matrix(1, dim, batch.x0.row(i).to_vec())?;
        let eps = randn(&mut seeded(seeds[0]), 1, dim);
        let xt = forward_noise(&x0, t, &eps, schedule)?;
        targets.extend(implied_noise(xt.data(), x0.data(), t, schedule));
        xs.extend(xt.into_data());
        ts.push(t);
    }
    let x = Array::matrix(ts.len(), dim, xs)?;
    let targets = Array::matrix(ts.len(), dim, targets)?;
    let omega = cfg.omega;
    optimize_step(model, optim, adam, |m, tape, params| {
        let l = eps_loss(m, tape, params, &x, &ts, &batch.conds, &targets, batch.len())?;
        Ok(tape.scale(l, omega)?)
    })
}

/// `(x_t − α_t·x0)/σ_t`, the noise that maps `x0` to `x_t`.
fn implied_noise(xt: &[f64], x0: &[f64], t: usize, schedule: &Schedule) -> Vec<f64> {
    let (a, s) = (schedule.alpha(t), schedule.sigma(t));
    xt.iter().zip(x0).map(|(x, c)| (x - a * c) / s).collect()
}

/// Rolls out `n` deterministic candidates per example, keeps the best, and
/// regresses the model onto the noise implied by each of its input states
/// relative to the original clean sample.
#[allow(clippy::too_many_arguments)]
pub fn sft_sharpen_step(
    model: &mut Denoiser,
    optim: &mut OptimState,
    batch: &Batch,
    cfg: &TrainConfig,
    schedule: &Schedule,
    reward: &StateReward,
    adam: &AdamWConfig,
    rng: &mut SeededRng,
) -> Result<StepReport> {
    let smp = sampler(&cfg.sft_sampler)?;
    let range = cfg.timestep_range(cfg.m, schedule)?;
    let draws: Vec<(usize, Vec<u64>)> = (0..batch.len()).map(|_| draw_example(rng, range, cfg.n)).collect();
    let requests: Vec<RolloutRequest<'_>> = draws
        .iter()
        .enumerate()
        .map(|(i, (t, seeds))| RolloutRequest {
            x0: batch.x0.row(i),
            cond: batch.conds[i],
            t: *t,
            seeds: seeds.clone(),
        })
        .collect();
    let guided = Guided::new(model, cfg.guidance_scale);
    let rolled = rollout(&requests, cfg.m, smp.as_ref(), &guided, schedule, reward)?;
    let nfe = rollout_nfe(&guided, &requests, cfg.m);
    let groups = rolled
        .into_iter()
        .map(|trajs| CandidateGroup::new(trajs, false))
        .collect::<Result<Vec<_>>>()?;

    let dim = batch.x0.cols();
    let (mut xs, mut ts, mut conds, mut targets) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (i, g) in groups.iter().enumerate() {
        let best = &g.trajectories[g.best];
        for (input, t, _) in best.transitions() {
            if schedule.sigma(t) < MIN_TARGET_SIGMA {
                warn!("skipping state at t={t}: noise level too small for an ε target");
                continue;
            }
            targets.extend(implied_noise(input, batch.x0.row(i), t, schedule));
            xs.extend_from_slice(input);
            ts.push(t);
            conds.push(batch.conds[i]);
        }
    }
    if ts.is_empty() {
        return Err(Error::Numerical("no usable states in the selected trajectories".into()));
    }
    let x = Array::matrix(ts.len(), dim, xs)?;
    let targets = Array::matrix(ts.len(), dim, targets)?;
    let omega = cfg.omega;
    let loss = optimize_step(model, optim, adam, |m, tape, params| {
        let l = eps_loss(m, tape, params, &x, &ts, &conds, &targets, batch.len())?;
        Ok(tape.scale(l, omega)?)
    })?;
    Ok(StepReport { loss, groups, nfe })
}

/// Network evaluations of a rollout: `m` steps plus one reward estimate of
/// the final state, per candidate.
fn rollout_nfe(guided: &Guided<'_>, requests: &[RolloutRequest<'_>], m: usize) -> u64 {
    use crate::schedules::NoisePredictor;
    requests
        .iter()
        .map(|r| r.seeds.len() as u64 * (m as u64 + 1) * guided.evals_per_row(r.cond))
        .sum()
}

/// Stacked transitions of several trajectories, ready for log-density
/// evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct TransitionRows {
    pub inputs: Array,
    pub next: Array,
    pub ts: Vec<usize>,
    pub conds: Vec<Cond>,
}

impl TransitionRows {
    pub fn from_trajectories<'a>(trajs: impl IntoIterator<Item = &'a crate::trajectory::Trajectory>) -> Result<Self> {
        let (mut inputs, mut next, mut ts, mut conds) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        let mut dim = 0;
        for tr in trajs {
            for (x, t, s) in tr.transitions() {
                dim = x.len();
                inputs.extend_from_slice(x);
                next.extend_from_slice(s);
                ts.push(t);
                conds.push(tr.cond);
            }
        }
        if ts.is_empty() {
            return Err(Error::Invalid("no transitions".into()));
        }
        Ok(TransitionRows {
            inputs: Array::matrix(ts.len(), dim, inputs)?,
            next: Array::matrix(ts.len(), dim, next)?,
            ts,
            conds,
        })
    }
}

/// Per-row `log N(next; μ_θ(input, t), v_t·I)` of the ancestral transition
/// `t → t−1` under the guided model, as a `[rows, 1]` tape node.
pub fn transition_log_probs(
    model: &Denoiser,
    tape: &mut Tape,
    params: &[Var],
    rows: &TransitionRows,
    guidance: f64,
    schedule: &Schedule,
) -> Result<Var> {
    let r = rows.ts.len();
    let dim = rows.inputs.cols();
    let mut eps_coef = Vec::with_capacity(r);
    let mut inv_var = Vec::with_capacity(r);
    let mut norm = Vec::with_capacity(r);
    let mut residual = rows.next.clone();
    for (i, &t) in rows.ts.iter().enumerate() {
        let c = AncestralCoefficients::new(t, t - 1, schedule)?;
        if !(c.variance > 0.0) {
            return Err(Error::Numerical(format!("zero transition variance at t={t}")));
        }
        for (o, &x) in residual.row_mut(i).iter_mut().zip(rows.inputs.row(i)) {
            *o -= c.x_coef * x;
        }
        eps_coef.push(c.eps_coef);
        inv_var.push(-0.5 / c.variance);
        norm.push(-0.5 * dim as f64 * (2.0 * std::f64::consts::PI * c.variance).ln());
    }
    let x = tape.var(rows.inputs.clone());
    let eps = model.forward_guided(tape, params, x, &rows.ts, &rows.conds, guidance)?;
    let coef = tape.var(Array::matrix(r, 1, eps_coef)?);
    let scaled = tape.mul(eps, coef)?;
    let res = tape.var(residual);
    let diff = tape.sub(res, scaled)?;
    let sq = tape.mul(diff, diff)?;
    let sq = tape.row_sum(sq)?;
    let w = tape.var(Array::matrix(r, 1, inv_var)?);
    let quad = tape.mul(sq, w)?;
    let norm = tape.var(Array::matrix(r, 1, norm)?);
    Ok(tape.add(quad, norm)?)
}

/// Reference log-densities, evaluated without recording gradients for the
/// policy.
pub fn reference_log_probs(reference: &Denoiser, rows: &TransitionRows, guidance: f64, schedule: &Schedule) -> Result<Array> {
    let mut tape = Tape::new();
    let params = reference.leaves(&mut tape);
    let lp = transition_log_probs(reference, &mut tape, &params, rows, guidance, schedule)?;
    Ok(tape.value(lp).clone())
}

/// `mean_b softplus(−(β·(Δ_w − Δ_l) − λ·gap_b))` where `Δ` sums the
/// policy-minus-reference log-densities over a trajectory's steps.
///
/// `pairs[b] = (winner rows, loser rows)` index into the stacked rows.
#[allow(clippy::too_many_arguments)]
pub fn preference_loss(
    model: &Denoiser,
    tape: &mut Tape,
    params: &[Var],
    rows: &TransitionRows,
    reference_lp: &Array,
    pairs: &[(Vec<usize>, Vec<usize>)],
    gaps: &[f64],
    beta: f64,
    lambda: f64,
    guidance: f64,
    schedule: &Schedule,
) -> Result<Var> {
    let r = rows.ts.len();
    let b = pairs.len();
    let mut signs = vec![0.0; b * r];
    for (p, (win, lose)) in pairs.iter().enumerate() {
        for &i in win {
            signs[p * r + i] += 1.0;
        }
        for &i in lose {
            signs[p * r + i] -= 1.0;
        }
    }
    let lp = transition_log_probs(model, tape, params, rows, guidance, schedule)?;
    let lp_ref = tape.var(reference_lp.clone());
    let delta = tape.sub(lp, lp_ref)?;
    let signs = tape.var(Array::matrix(b, r, signs)?);
    let margin = tape.matmul(signs, delta)?;
    let margin = tape.scale(margin, beta)?;
    let gap = tape.var(Array::matrix(b, 1, gaps.iter().map(|g| lambda * g).collect())?);
    let z = tape.sub(margin, gap)?;
    let nz = tape.neg(z)?;
    let sp = tape.softplus(nz)?;
    Ok(tape.mean(sp)?)
}

/// Generates a clean sample per prompt with the current model and the
/// preference sampler, rolls out `n` stochastic candidates from it, and takes
/// one step on the reward-modulated preference loss between the best and
/// worst.
#[allow(clippy::too_many_arguments)]
pub fn rlhf_sharpen_step(
    model: &mut Denoiser,
    reference: &Denoiser,
    optim: &mut OptimState,
    prompts: &[Cond],
    cfg: &TrainConfig,
    schedule: &Schedule,
    reward: &StateReward,
    adam: &AdamWConfig,
    rng: &mut SeededRng,
) -> Result<StepReport> {
    if cfg.n < 2 {
        return Err(Error::Config(format!("preference training needs n >= 2, got {}", cfg.n)));
    }
    let smp = sampler(&cfg.rlhf_sampler)?;
    if !smp.is_stochastic() {
        return Err(Error::Config(format!("sampler `{}` has no transition densities", smp.name())));
    }
    let range = cfg.timestep_range(cfg.m, schedule)?;
    let dim = model.data_dim();
    let guided = Guided::new(model, cfg.guidance_scale);
    let noise = randn(rng, prompts.len(), dim);
    let (clean, gen_nfe) = sample_chain(smp.as_ref(), &guided, schedule, noise, prompts, rng)?;
    let draws: Vec<(usize, Vec<u64>)> = (0..prompts.len()).map(|_| draw_example(rng, range, cfg.n)).collect();
    let requests: Vec<RolloutRequest<'_>> = draws
        .iter()
        .enumerate()
        .map(|(i, (t, seeds))| RolloutRequest {
            x0: clean.row(i),
            cond: prompts[i],
            t: *t,
            seeds: seeds.clone(),
        })
        .collect();
    let rolled = rollout(&requests, cfg.m, smp.as_ref(), &guided, schedule, reward)?;
    let nfe = gen_nfe.iter().sum::<u64>() + rollout_nfe(&guided, &requests, cfg.m);
    let groups = rolled
        .into_iter()
        .map(|trajs| CandidateGroup::new(trajs, true))
        .collect::<Result<Vec<_>>>()?;

    let mut ordered = Vec::with_capacity(2 * groups.len());
    let mut pairs = Vec::with_capacity(groups.len());
    let mut gaps = Vec::with_capacity(groups.len());
    let mut next_row = 0;
    for g in &groups {
        let w = g.best;
        let l = g.worst.expect("pairs were selected");
        let (wn, ln) = (g.trajectories[w].len(), g.trajectories[l].len());
        pairs.push(((next_row..next_row + wn).collect(), (next_row + wn..next_row + wn + ln).collect()));
        next_row += wn + ln;
        ordered.push(&g.trajectories[w]);
        ordered.push(&g.trajectories[l]);
        gaps.push(g.aggregates[w] - g.aggregates[l]);
    }
    let rows = TransitionRows::from_trajectories(ordered)?;
    let reference_lp = reference_log_probs(reference, &rows, cfg.guidance_scale, schedule)?;
    let (beta, lambda, w) = (cfg.beta, cfg.effective_lambda(), cfg.guidance_scale);
    let loss = optimize_step(model, optim, adam, |m, tape, params| {
        preference_loss(m, tape, params, &rows, &reference_lp, &pairs, &gaps, beta, lambda, w, schedule)
    })?;
    Ok(StepReport { loss, groups, nfe })
}

struct Pretrain {
    ctx: TrainerContext,
}

impl Trainer for Pretrain {
    fn name(&self) -> &'static str {
        "pretrain"
    }

    fn set_lr(&mut self, lr: f64) {
        self.ctx.config.lr = lr;
    }

    fn step(&mut self, model: &mut Denoiser, optim: &mut OptimState, batch: &Batch, rng: &mut SeededRng) -> Result<StepReport> {
        let schedule = &self.ctx.schedule;
        let b = batch.len();
        let ts: Vec<usize> = (0..b).map(|_| rng.gen_range(1..=schedule.steps())).collect();
        let eps = randn(rng, b, batch.x0.cols());
        let drop = self.ctx.config.null_drop_prob;
        let conds: Vec<Cond> = batch.conds.iter().map(|&c| if rng.gen::<f64>() < drop { None } else { c }).collect();
        let xt = forward_noise_rows(&batch.x0, &ts, &eps, schedule)?;
        let omega = self.ctx.config.omega;
        let loss = optimize_step(model, optim, &self.ctx.adam(), |m, tape, params| {
            let l = eps_loss(m, tape, params, &xt, &ts, &conds, &eps, b)?;
            Ok(tape.scale(l, omega)?)
        })?;
        Ok(StepReport {
            loss,
            ..StepReport::default()
        })
    }
}

struct Standard {
    ctx: TrainerContext,
}

impl Trainer for Standard {
    fn name(&self) -> &'static str {
        "standard"
    }

    fn set_lr(&mut self, lr: f64) {
        self.ctx.config.lr = lr;
    }

    fn step(&mut self, model: &mut Denoiser, optim: &mut OptimState, batch: &Batch, rng: &mut SeededRng) -> Result<StepReport> {
        let loss = standard_finetune_step(model, optim, batch, &self.ctx.config, &self.ctx.schedule, &self.ctx.adam(), rng)?;
        Ok(StepReport {
            loss,
            ..StepReport::default()
        })
    }
}

struct Sft {
    ctx: TrainerContext,
    reward: StateReward,
}

impl Trainer for Sft {
    fn name(&self) -> &'static str {
        "sft"
    }

    fn set_lr(&mut self, lr: f64) {
        self.ctx.config.lr = lr;
    }

    fn step(&mut self, model: &mut Denoiser, optim: &mut OptimState, batch: &Batch, rng: &mut SeededRng) -> Result<StepReport> {
        let adam = self.ctx.adam();
        sft_sharpen_step(model, optim, batch, &self.ctx.config, &self.ctx.schedule, &self.reward, &adam, rng)
    }
}

struct Rlhf {
    name: &'static str,
    ctx: TrainerContext,
    reward: StateReward,
    reference: Option<Denoiser>,
    steps: usize,
}

impl Trainer for Rlhf {
    fn name(&self) -> &'static str {
        self.name
    }

    fn set_lr(&mut self, lr: f64) {
        self.ctx.config.lr = lr;
    }

    fn step(&mut self, model: &mut Denoiser, optim: &mut OptimState, batch: &Batch, rng: &mut SeededRng) -> Result<StepReport> {
        let refresh = self.ctx.config.reference_refresh;
        if self.reference.is_none() || (refresh > 0 && self.steps > 0 && self.steps % refresh == 0) {
            self.reference = Some(model.clone());
        }
        self.steps += 1;
        let adam = self.ctx.adam();
        let reference = self.reference.as_ref().expect("reference set above");
        rlhf_sharpen_step(model, reference, optim, &batch.conds, &self.ctx.config, &self.ctx.schedule, &self.reward, &adam, rng)
    }
}

type TrainerCtor = fn(TrainerContext) -> Result<Box<dyn Trainer>>;

fn rlhf(mut ctx: TrainerContext, name: &'static str) -> Result<Box<dyn Trainer>> {
    if name == "dpo-vanilla" {
        ctx.config.n = 2;
        ctx.config.lambda = 0.0;
    }
    ctx.config.validate(&ctx.schedule)?;
    let reward = ctx.reward(name)?;
    let reference = ctx.reference.clone();
    Ok(Box::new(Rlhf {
        name,
        ctx,
        reward,
        reference,
        steps: 0,
    }))
}

static TRAINERS: Lazy<BTreeMap<&'static str, TrainerCtor>> = Lazy::new(|| {
    let mut map: BTreeMap<&'static str, TrainerCtor> = BTreeMap::new();
    map.insert("pretrain", |ctx| Ok(Box::new(Pretrain { ctx })));
    map.insert("standard", |ctx| {
        ctx.config.timestep_range(1, &ctx.schedule)?;
        Ok(Box::new(Standard { ctx }))
    });
    map.insert("sft", |ctx| {
        ctx.config.validate(&ctx.schedule)?;
        let reward = ctx.reward("sft")?;
        Ok(Box::new(Sft { ctx, reward }))
    });
    map.insert("rlhf", |ctx| rlhf(ctx, "rlhf"));
    map.insert("dpo-vanilla", |ctx| rlhf(ctx, "dpo-vanilla"));
    map
});

pub fn trainer_names() -> Vec<&'static str> {
    TRAINERS.keys().copied().collect()
}

pub fn make_trainer(name: &str, ctx: TrainerContext) -> Result<Box<dyn Trainer>> {
    let ctor = TRAINERS.get(name).ok_or_else(|| Error::UnknownName {
        what: "trainer",
        name: name.to_string(),
        known: trainer_names().join(", "),
    })?;
    ctor(ctx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Affine;
    use crate::denoiser::DenoiserConfig;
    use crate::rewards::ModeDistance;
    use crate::schedules::make_schedule;
    use std::sync::Arc;

    fn setup() -> (Denoiser, Schedule, StateReward) {
        let cfg = DenoiserConfig {
            hidden: 16,
            layers: 2,
            steps: 10,
            ..DenoiserConfig::default()
        };
        let model = Denoiser::new(cfg, 3).unwrap();
        let schedule = make_schedule("cosine", 10).unwrap();
        let reward = StateReward::new(Arc::new(ModeDistance::new(vec![1.0, 0.0])), Affine::identity(2), Default::default());
        (model, schedule, reward)
    }

    #[test]
    fn registry_lists_all_trainers() {
        assert_eq!(trainer_names(), vec!["dpo-vanilla", "pretrain", "rlhf", "sft", "standard"]);
        let (_, schedule, _) = setup();
        let ctx = TrainerContext {
            config: TrainConfig::default(),
            schedule,
            reward: None,
            reference: None,
        };
        assert!(matches!(make_trainer("ppo", ctx.clone()), Err(Error::UnknownName { .. })));
        assert!(make_trainer("rlhf", ctx).is_err());
    }

    #[test]
    fn rlhf_needs_two_candidates() {
        let (mut model, schedule, reward) = setup();
        let reference = model.clone();
        let mut optim = OptimState::new(model.params());
        let cfg = TrainConfig {
            n: 1,
            ..TrainConfig::default()
        };
        let err = rlhf_sharpen_step(&mut model, &reference, &mut optim, &[None], &cfg, &schedule, &reward, &AdamWConfig::default(), &mut seeded(0));
        assert!(err.is_err());
    }

    #[test]
    fn tape_log_probs_match_sampler_log_probs() {
        let (model, schedule, reward) = setup();
        let smp = sampler("ancestral").unwrap();
        let guided = Guided::new(&model, 1.0);
        let trajs = crate::trajectory::sample_trajectories(&[0.3, -0.2], None, 6, 3, 3, smp.as_ref(), &guided, &schedule, &reward, &mut seeded(1)).unwrap();
        let rows = TransitionRows::from_trajectories(&trajs).unwrap();
        let lp = reference_log_probs(&model, &rows, 1.0, &schedule).unwrap();
        let recorded: Vec<f64> = trajs.iter().flat_map(|t| t.log_probs.clone().unwrap()).collect();
        for (a, b) in lp.data().iter().zip(&recorded) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }
}
