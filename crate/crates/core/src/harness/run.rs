//! A single training run: setup, the step loop, periodic evaluation and the
//! files of a run directory.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use gradkit::{Array, OptimState};
use log::info;
use rand::Rng;

use crate::data::{make_dataset, Dataset};
use crate::denoiser::{pretrain, Denoiser, Guided, DIVERGENCE_LOSS};
use crate::error::{Error, Result};
use crate::harness::config::ExperimentConfig;
use crate::harness::metrics::{decile_means, mmd2, mode_fractions, Bandwidth};
use crate::rewards::{build_reward, RewardContext, StateReward};
use crate::rng::{randn, seeded};
use crate::samplers::{sample_chain, sampler, Sampler};
use crate::schedules::{forward_noise_rows, Cond, Schedule};
use crate::trainers::{make_trainer, Batch, TrainerContext};
use crate::trajectory::write_jsonl;

/// Seed offsets keeping the evaluation streams apart from training.
const HELD_OUT_SALT: u64 = 0x4e1d_0u64;
const PROBE_SALT: u64 = 0x9e0b_e5;

/// One row of `metrics.csv`. Evaluation fields are filled on evaluation
/// steps only, training fields on steps ≥ 1.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricRecord {
    pub step: usize,
    pub loss: Option<f64>,
    pub smoothed_loss: Option<f64>,
    pub eval_loss: Option<f64>,
    pub reward_mean: Option<f64>,
    pub reward_std: Option<f64>,
    pub selected_reward: Option<f64>,
    pub nfe: Option<u64>,
    pub mmd2: Option<f64>,
    pub mean_final_reward: Option<f64>,
    pub mode_fractions: Option<Vec<f64>>,
    pub outside_fraction: Option<f64>,
}

/// Evaluation-only fields of a record.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalResult {
    pub eval_loss: Option<f64>,
    pub mmd2: Option<f64>,
    pub mean_final_reward: Option<f64>,
    pub mode_fractions: Option<Vec<f64>>,
    pub outside_fraction: Option<f64>,
    /// Generated samples in raw coordinates.
    pub samples: Array,
}

impl MetricRecord {
    fn with_eval(mut self, e: &EvalResult) -> Self {
        self.eval_loss = e.eval_loss;
        self.mmd2 = e.mmd2;
        self.mean_final_reward = e.mean_final_reward;
        self.mode_fractions = e.mode_fractions.clone();
        self.outside_fraction = e.outside_fraction;
        self
    }

    /// Evaluation metrics keyed like the summary (`mmd2`, `mode_fraction_0`, ...).
    pub fn eval_metrics(&self) -> BTreeMap<String, f64> {
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: Option<f64>| {
            if let Some(v) = v {
                m.insert(k.to_string(), v);
            }
        };
        put("eval_loss", self.eval_loss);
        put("mmd2", self.mmd2);
        put("mean_final_reward", self.mean_final_reward);
        put("outside_fraction", self.outside_fraction);
        for (k, f) in self.mode_fractions.iter().flatten().enumerate() {
            m.insert(format!("mode_fraction_{k}"), *f);
        }
        m
    }
}

pub fn metrics_header(modes: usize) -> Vec<String> {
    let mut h: Vec<String> = [
        "step",
        "loss",
        "smoothed_loss",
        "eval_loss",
        "reward_mean",
        "reward_std",
        "selected_reward",
        "nfe",
        "mmd2",
        "mean_final_reward",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    h.extend((0..modes).map(|k| format!("mode_fraction_{k}")));
    h.push("outside_fraction".into());
    h
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn record_row(r: &MetricRecord, modes: usize) -> Vec<String> {
    let mut row = vec![
        r.step.to_string(),
        cell(r.loss),
        cell(r.smoothed_loss),
        cell(r.eval_loss),
        cell(r.reward_mean),
        cell(r.reward_std),
        cell(r.selected_reward),
        r.nfe.map(|n| n.to_string()).unwrap_or_default(),
        cell(r.mmd2),
        cell(r.mean_final_reward),
    ];
    for k in 0..modes {
        row.push(cell(r.mode_fractions.as_ref().and_then(|f| f.get(k).copied())));
    }
    row.push(cell(r.outside_fraction));
    row
}

/// Everything a finished run reports back.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub records: Vec<MetricRecord>,
    pub summary: BTreeMap<String, f64>,
    /// Descriptions of the assertions that did not hold.
    pub failures: Vec<String>,
    pub model: Denoiser,
}

impl RunOutcome {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }

    /// A training-column series over steps ≥ 1.
    pub fn series(&self, pick: impl Fn(&MetricRecord) -> Option<f64>) -> Vec<(usize, f64)> {
        self.records.iter().filter_map(|r| pick(r).map(|v| (r.step, v))).collect()
    }
}

/// Fixed evaluation inputs, drawn once per run.
pub struct Evaluator {
    held_out: Dataset,
    probe: Option<(Array, Vec<usize>, Array, Vec<Cond>)>,
    condition: Cond,
    samples: usize,
    seed: u64,
    mmd: bool,
    mode_radius: f64,
    guidance: f64,
    sampler: Box<dyn Sampler>,
}

impl Evaluator {
    pub fn new(cfg: &ExperimentConfig, dataset: &Dataset, schedule: &Schedule) -> Result<Self> {
        let e = &cfg.eval;
        if e.samples < 2 {
            return Err(Error::Config("eval.samples must be >= 2".into()));
        }
        let held_out = dataset.held_out(e.held_out.max(e.probe).max(2), e.seed ^ HELD_OUT_SALT)?;
        let probe = if e.probe > 0 {
            let mut rng = seeded(e.seed ^ PROBE_SALT);
            let x0 = held_out.samples().select_rows(&(0..e.probe).collect::<Vec<_>>())?;
            let ts: Vec<usize> = (0..e.probe).map(|_| rng.gen_range(1..=schedule.steps())).collect();
            let eps = randn(&mut rng, e.probe, x0.cols());
            let conds = vec![e.condition; e.probe];
            Some((forward_noise_rows(&x0, &ts, &eps, schedule)?, ts, eps, conds))
        } else {
            None
        };
        Ok(Evaluator {
            held_out,
            probe,
            condition: e.condition,
            samples: e.samples,
            seed: e.seed,
            mmd: e.mmd,
            mode_radius: e.mode_radius,
            guidance: cfg.trainer.guidance_scale,
            sampler: sampler(&e.sampler)?,
        })
    }

    pub fn evaluate(&self, model: &Denoiser, dataset: &Dataset, schedule: &Schedule, reward: Option<&StateReward>) -> Result<EvalResult> {
        let guided = Guided::new(model, self.guidance);
        let conds = vec![self.condition; self.samples];
        let mut rng = seeded(self.seed);
        let noise = randn(&mut rng, self.samples, model.data_dim());
        let (z, _) = sample_chain(self.sampler.as_ref(), &guided, schedule, noise, &conds, &mut rng)?;
        let raw = dataset.affine().to_raw(&z);
        let eval_loss = match &self.probe {
            Some((xt, ts, eps, pc)) => {
                let pred = model.predict_eps_rows(xt, ts, pc)?;
                let sq: f64 = pred.data().iter().zip(eps.data()).map(|(a, b)| (a - b) * (a - b)).sum();
                Some(sq / ts.len() as f64)
            }
            None => None,
        };
        let mmd = if self.mmd {
            Some(mmd2(&raw, &self.held_out.raw(), Bandwidth::Median)?)
        } else {
            None
        };
        let (fractions, outside) = match dataset.mixture() {
            Some(mix) => {
                let f = mode_fractions(&raw, &mix, self.mode_radius)?;
                (Some(f.fractions), Some(f.outside))
            }
            None => (None, None),
        };
        let mean_final_reward = match reward {
            Some(r) => {
                let s = r.clean(&z, &conds)?;
                Some(s.iter().sum::<f64>() / s.len() as f64)
            }
            None => None,
        };
        Ok(EvalResult {
            eval_loss,
            mmd2: mmd,
            mean_final_reward,
            mode_fractions: fractions,
            outside_fraction: outside,
            samples: raw,
        })
    }
}

fn write_samples(path: &Path, raw: &Array) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record((0..raw.cols()).map(|j| format!("x{j}")))?;
    for i in 0..raw.rows() {
        w.write_record(raw.row(i).iter().map(|v| v.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// The model a run starts from.
pub fn initial_model(cfg: &ExperimentConfig, dataset: &Dataset, schedule: &Schedule, run_dir: &Path) -> Result<Denoiser> {
    if cfg.model.data_dim != dataset.dim() {
        return Err(Error::Config(format!("model.data_dim {} but dataset has {} dims", cfg.model.data_dim, dataset.dim())));
    }
    if cfg.trainer.kind == "pretrain" {
        return Denoiser::new(cfg.model.clone(), cfg.trainer.seed);
    }
    let path = cfg.init_checkpoint.clone().unwrap_or_else(|| run_dir.join("base.json"));
    if path.exists() {
        let model = Denoiser::load(&path)?;
        if model.config() != &cfg.model {
            return Err(Error::Checkpoint {
                path,
                reason: "architecture differs from `model` in the config".into(),
            });
        }
        return Ok(model);
    }
    info!("no checkpoint at {}; pretraining for {} steps", path.display(), cfg.base.steps);
    let mut model = Denoiser::new(cfg.model.clone(), cfg.base.seed)?;
    pretrain(&mut model, dataset, schedule, &cfg.base)?;
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    model.save(&path)?;
    Ok(model)
}

pub fn build_state_reward(cfg: &ExperimentConfig, dataset: &Dataset) -> Result<Option<StateReward>> {
    let ctx = RewardContext {
        mixture: dataset.mixture(),
    };
    cfg.reward
        .as_ref()
        .map(|spec| Ok(StateReward::new(build_reward(spec, &ctx)?, dataset.affine().clone(), cfg.trainer.estimator)))
        .transpose()
}

fn draw_batch(cfg: &ExperimentConfig, dataset: &Dataset, rng: &mut impl Rng) -> Result<Batch> {
    let b = cfg.trainer.batch_size;
    let idx: Vec<usize> = (0..b).map(|_| rng.gen_range(0..dataset.len())).collect();
    let conds = match (cfg.trainer.use_labels, dataset.labels()) {
        (true, Some(labels)) => idx.iter().map(|&i| Some(labels[i])).collect(),
        (true, None) => return Err(Error::Config("trainer.use_labels set but the dataset has no labels".into())),
        (false, _) => vec![cfg.trainer.condition; b],
    };
    Ok(Batch {
        x0: dataset.samples().select_rows(&idx)?,
        conds,
    })
}

/// Start/end and decile statistics of a finished run.
pub fn summarize(records: &[MetricRecord]) -> BTreeMap<String, f64> {
    let mut s = BTreeMap::new();
    let evals: Vec<&MetricRecord> = records.iter().filter(|r| r.mmd2.is_some() || r.mode_fractions.is_some() || r.eval_loss.is_some() || r.mean_final_reward.is_some()).collect();
    if let (Some(first), Some(last)) = (evals.first(), evals.last()) {
        for (k, v) in first.eval_metrics() {
            s.insert(format!("initial.{k}"), v);
        }
        for (k, v) in last.eval_metrics() {
            s.insert(format!("final.{k}"), v);
        }
    }
    let train: Vec<&MetricRecord> = records.iter().filter(|r| r.loss.is_some()).collect();
    s.insert("steps".into(), train.len() as f64);
    if let Some(last) = train.last() {
        s.insert("final.loss".into(), last.loss.unwrap_or(f64::NAN));
        s.insert("final.smoothed_loss".into(), last.smoothed_loss.unwrap_or(f64::NAN));
    }
    s.insert("nfe_total".into(), train.iter().filter_map(|r| r.nfe).sum::<u64>() as f64);
    let mut deciles = |name: &str, pick: fn(&MetricRecord) -> Option<f64>| {
        let xs: Vec<f64> = train.iter().filter_map(|r| pick(r)).collect();
        if let Some((a, b)) = decile_means(&xs) {
            s.insert(format!("{name}.first_decile"), a);
            s.insert(format!("{name}.last_decile"), b);
            s.insert(format!("{name}.decile_ratio"), b / a);
        }
    };
    deciles("reward_mean", |r| r.reward_mean);
    deciles("reward_std", |r| r.reward_std);
    deciles("selected_reward", |r| r.selected_reward);
    deciles("loss", |r| r.loss);
    s
}

/// First step at which a series reaches `threshold` or below.
pub fn first_step_at_or_below(series: &[(usize, f64)], threshold: f64) -> Option<usize> {
    series.iter().find(|(_, v)| *v <= threshold).map(|(s, _)| *s)
}

/// Runs one experiment into `cfg.run_dir()` and checks its assertions.
///
/// Layout: `config.json`, `metrics.csv`, `timing.csv` (wall clock, kept
/// apart so metrics are bit-reproducible), `samples_step{N}.csv` per
/// evaluation, `trajectories.jsonl`, `model.json`, `summary.json`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    let dir = cfg.run_dir();
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    write_text(&dir.join("config.json"), &cfg.to_json())?;

    let dataset = make_dataset(&cfg.dataset.kind, cfg.dataset.n, cfg.dataset.seed)?;
    let schedule = Schedule::new(cfg.model.schedule, cfg.model.steps)?;
    let mut model = initial_model(cfg, &dataset, &schedule, &dir)?;
    let reward = build_state_reward(cfg, &dataset)?;
    let ctx = TrainerContext {
        config: cfg.trainer.clone(),
        schedule: schedule.clone(),
        reward: reward.clone(),
        reference: Some(model.clone()),
    };
    let mut trainer = make_trainer(&cfg.trainer.kind, ctx)?;
    let evaluator = Evaluator::new(cfg, &dataset, &schedule)?;
    let modes = dataset.mixture().map_or(0, |m| m.means().len());

    let metrics_path = dir.join("metrics.csv");
    let mut metrics = csv::Writer::from_path(&metrics_path)?;
    metrics.write_record(metrics_header(modes))?;
    let timing_path = dir.join("timing.csv");
    let mut timing = csv::Writer::from_path(&timing_path)?;
    timing.write_record(["step", "wall_clock_s"])?;
    let dump_path = dir.join("trajectories.jsonl");
    let mut dump = BufWriter::new(File::create(&dump_path).map_err(|e| Error::io(&dump_path, e))?);

    let started = Instant::now();
    let mut records = Vec::with_capacity(cfg.trainer.steps + 1);
    let mut emit = |r: MetricRecord, metrics: &mut csv::Writer<File>, timing: &mut csv::Writer<File>| -> Result<()> {
        metrics.write_record(record_row(&r, modes))?;
        timing.write_record([r.step.to_string(), started.elapsed().as_secs_f64().to_string()])?;
        records.push(r);
        Ok(())
    };

    let e0 = evaluator.evaluate(&model, &dataset, &schedule, reward.as_ref())?;
    write_samples(&dir.join("samples_step0.csv"), &e0.samples)?;
    emit(MetricRecord::default().with_eval(&e0), &mut metrics, &mut timing)?;

    let mut optim = OptimState::new(model.params());
    let mut average = cfg.trainer.weight_ema.map(|_| model.clone());
    let mut rng = seeded(cfg.trainer.seed);
    let mut ema: Option<f64> = None;
    let steps = cfg.trainer.steps;
    for step in 1..=steps {
        trainer.set_lr(cfg.trainer.lr_schedule.at(cfg.trainer.lr, step - 1, steps));
        let batch = draw_batch(cfg, &dataset, &mut rng)?;
        let report = trainer.step(&mut model, &mut optim, &batch, &mut rng)?;
        if !(report.loss <= DIVERGENCE_LOSS) {
            return Err(Error::Diverged { step, loss: report.loss });
        }
        if let (Some(avg), Some(rate)) = (average.as_mut(), cfg.trainer.weight_ema) {
            avg.params_mut().ema_toward(model.params(), rate)?;
        }
        let smoothed = ema.map_or(report.loss, |p| p + cfg.trainer.ema * (report.loss - p));
        ema = Some(smoothed);
        let dump_every = cfg.eval.trajectory_dump_every;
        if dump_every > 0 && step % dump_every == 0 {
            let recs: Vec<_> = report.groups.iter().enumerate().flat_map(|(i, g)| g.records(step, i)).collect();
            write_jsonl(&mut dump, &recs)?;
        }
        let mut rec = MetricRecord {
            step,
            loss: Some(report.loss),
            smoothed_loss: Some(smoothed),
            reward_mean: report.reward_mean(),
            reward_std: report.reward_std(),
            selected_reward: report.selected_reward(),
            nfe: Some(report.nfe),
            ..MetricRecord::default()
        };
        let eval_now = step == steps || (cfg.eval.every > 0 && step % cfg.eval.every == 0);
        if eval_now {
            let e = evaluator.evaluate(average.as_ref().unwrap_or(&model), &dataset, &schedule, reward.as_ref())?;
            write_samples(&dir.join(format!("samples_step{step}.csv")), &e.samples)?;
            rec = rec.with_eval(&e);
            info!(
                "[{}] step {step}/{steps}: loss {:.4} smoothed {:.4} eval {:?}",
                cfg.id,
                report.loss,
                smoothed,
                rec.eval_metrics()
            );
        }
        emit(rec, &mut metrics, &mut timing)?;
    }
    metrics.flush().map_err(|e| Error::io(&metrics_path, e))?;
    timing.flush().map_err(|e| Error::io(&timing_path, e))?;
    dump.flush().map_err(|e| Error::io(&dump_path, e))?;
    let model = average.unwrap_or(model);
    model.save(&dir.join("model.json"))?;

    let summary = summarize(&records);
    write_text(&dir.join("summary.json"), &serde_json::to_string_pretty(&summary)?)?;
    let failures: Vec<String> = cfg.assertions.iter().filter_map(|a| a.check(&summary).err()).collect();
    let mut report = File::create(dir.join("assertions.txt")).map_err(|e| Error::io(dir.join("assertions.txt"), e))?;
    for a in &cfg.assertions {
        let line = match a.check(&summary) {
            Ok(()) => format!("[PASS] {a}"),
            Err(why) => format!("[FAIL] {why}"),
        };
        writeln!(report, "{line}").map_err(|e| Error::io(dir.join("assertions.txt"), e))?;
    }
    Ok(RunOutcome {
        dir,
        records,
        summary,
        failures,
        model,
    })
}

/// Evaluates a checkpoint without training; writes `eval.json` and the
/// samples. Keys carry the `final.` prefix so run assertions apply.
pub fn evaluate_checkpoint(cfg: &ExperimentConfig, checkpoint: &Path) -> Result<BTreeMap<String, f64>> {
    let dir = cfg.run_dir();
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let dataset = make_dataset(&cfg.dataset.kind, cfg.dataset.n, cfg.dataset.seed)?;
    let model = Denoiser::load(checkpoint)?;
    let schedule = Schedule::new(model.config().schedule, model.config().steps)?;
    let reward = build_state_reward(cfg, &dataset)?;
    let e = Evaluator::new(cfg, &dataset, &schedule)?.evaluate(&model, &dataset, &schedule, reward.as_ref())?;
    write_samples(&dir.join("samples_eval.csv"), &e.samples)?;
    let metrics: BTreeMap<String, f64> = MetricRecord::default()
        .with_eval(&e)
        .eval_metrics()
        .into_iter()
        .map(|(k, v)| (format!("final.{k}"), v))
        .collect();
    write_text(&dir.join("eval.json"), &serde_json::to_string_pretty(&metrics)?)?;
    Ok(metrics)
}
