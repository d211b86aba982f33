//! Reward against inference cost: best-of-n search on a base model and plain
//! sampling from a sharpened one.

use std::path::{Path, PathBuf};

use crate::baselines::{best_of_n_inference, generate, NfeLedger};
use crate::data::make_dataset;
use crate::denoiser::{Denoiser, Guided};
use crate::error::{Error, Result};
use crate::harness::config::ExperimentConfig;
use crate::harness::metrics::{mean, std_err, welch_lower_bound};
use crate::harness::plot::plot_inference;
use crate::harness::run::build_state_reward;
use crate::rng::seeded;
use crate::samplers::sampler;
use crate::schedules::{Cond, Schedule};

#[derive(Clone, Debug, PartialEq)]
pub struct MethodResult {
    /// `best_of_n` or `sharpened`.
    pub method: String,
    pub n: usize,
    pub rewards: Vec<f64>,
    pub ledgers: Vec<NfeLedger>,
}

impl MethodResult {
    /// Mean NFE per prompt.
    pub fn nfe_per_sample(&self) -> f64 {
        self.ledgers.iter().map(|l| l.total() as f64).sum::<f64>() / self.ledgers.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InferenceReport {
    pub search: Vec<MethodResult>,
    pub sharpened: MethodResult,
    pub compare_n: usize,
    /// One-sided 95% lower bound on mean(sharpened) − mean(best-of-compare_n).
    pub lower_bound: f64,
    /// Whether each prompt's search cost is exactly `compare_n` times its
    /// sharpened cost.
    pub cost_ratio_exact: bool,
    pub dir: PathBuf,
}

impl InferenceReport {
    pub fn compared(&self) -> Option<&MethodResult> {
        self.search.iter().find(|m| m.n == self.compare_n)
    }
}

fn checkpoint(p: &Option<PathBuf>, what: &str) -> Result<Denoiser> {
    let p = p
        .as_ref()
        .ok_or_else(|| Error::Config(format!("baseline.{what}_checkpoint is not set")))?;
    Denoiser::load(p)
}

/// Compares models on `baseline.prompts` prompts, all under
/// `eval.condition`. Writes `inference.csv` and `inference.svg` into the run
/// directory.
pub fn inference_comparison(cfg: &ExperimentConfig) -> Result<InferenceReport> {
    let b = &cfg.baseline;
    if b.prompts < 2 {
        return Err(Error::Config("baseline.prompts must be >= 2".into()));
    }
    if !b.ns.contains(&b.compare_n) {
        return Err(Error::Config(format!("baseline.compare_n {} is not among baseline.ns", b.compare_n)));
    }
    let base = checkpoint(&b.base_checkpoint, "base")?;
    let sharp = checkpoint(&b.sharpened_checkpoint, "sharpened")?;
    if base.config() != sharp.config() {
        return Err(Error::Config("base and sharpened checkpoints differ in architecture".into()));
    }
    let dataset = make_dataset(&cfg.dataset.kind, cfg.dataset.n, cfg.dataset.seed)?;
    let schedule = Schedule::new(base.config().schedule, base.config().steps)?;
    let reward = build_state_reward(cfg, &dataset)?.ok_or_else(|| Error::Config("the inference comparison needs a reward".into()))?;
    let prompts: Vec<Cond> = vec![cfg.eval.condition; b.prompts];
    let dim = base.data_dim();
    let w = cfg.trainer.guidance_scale;
    let smp = sampler(&cfg.eval.sampler)?;

    let mut search = Vec::with_capacity(b.ns.len());
    for (i, &n) in b.ns.iter().enumerate() {
        let mut rng = seeded(b.seed.wrapping_add(i as u64 + 1));
        let res = best_of_n_inference(&Guided::new(&base, w), smp.as_ref(), &prompts, n, dim, &reward, &schedule, &mut rng)?;
        search.push(MethodResult {
            method: "best_of_n".into(),
            n,
            rewards: res.iter().map(|r| r.reward).collect(),
            ledgers: res.iter().map(|r| r.ledger).collect(),
        });
    }
    let (z, ledgers) = generate(&Guided::new(&sharp, w), smp.as_ref(), &schedule, &prompts, dim, &mut seeded(b.seed))?;
    let sharpened = MethodResult {
        method: "sharpened".into(),
        n: 1,
        rewards: reward.clean(&z, &prompts)?,
        ledgers,
    };
    let compared = search.iter().find(|m| m.n == b.compare_n).expect("checked above");
    let lower_bound = welch_lower_bound(&sharpened.rewards, &compared.rewards);
    let cost_ratio_exact = compared
        .ledgers
        .iter()
        .zip(&sharpened.ledgers)
        .all(|(s, p)| s.total() == b.compare_n as u64 * p.total());
    let dir = cfg.run_dir();
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let report = InferenceReport {
        search,
        sharpened,
        compare_n: b.compare_n,
        lower_bound,
        cost_ratio_exact,
        dir,
    };
    write_csv(&report, &report.dir.join("inference.csv"))?;
    plot_inference(&report.dir)?;
    Ok(report)
}

fn write_csv(report: &InferenceReport, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["method", "n", "nfe_per_sample", "mean_reward", "std_err"])?;
    for m in report.search.iter().chain(std::iter::once(&report.sharpened)) {
        w.write_record([
            m.method.clone(),
            m.n.to_string(),
            m.nfe_per_sample().to_string(),
            mean(&m.rewards).to_string(),
            std_err(&m.rewards).to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
