//! `sharpen`: one entry point for pretraining, sharpening, baselines,
//! evaluation, sweeps and reward-server checks.
//!
//! Exit status: 0 on success, 1 when an assertion or check fails or a run
//! errors out, 2 on usage and configuration errors.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use sharpening::error::Error;
use sharpening::harness::{
    ablate, evaluate_checkpoint, exceeds_by_sd, inference_comparison, parse_values, plot_emit, run_experiment, Assertion,
    ExperimentConfig,
};
use sharpening::rewards::{soak, Endpoint, ExternalReward};

#[derive(Parser, Debug)]
#[command(name = "sharpen", version, about = "Trajectory-level reward sharpening of toy diffusion models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Experiment config (JSON). Defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training seed (`trainer.seed`).
    #[arg(long)]
    seed: Option<u64>,
    /// Output root (`out_dir`); the run goes to `<out>/<id>`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Check the config's assertions and exit 1 if any fails.
    #[arg(long = "assert")]
    assert: bool,
    /// Extra assertion such as `final.mode_fraction_0>=0.9`; repeatable.
    #[arg(long = "check", value_name = "EXPR")]
    checks: Vec<String>,
    /// Dotted-path overrides, `key=value`.
    #[arg(value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum BaselineMethod {
    /// Single-timestep ε-regression fine-tuning.
    Standard,
    /// Two-candidate preference training without reward modulation.
    DpoVanilla,
    /// Best-of-n search on the base model against a sharpened checkpoint.
    BestOfN,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a denoiser from scratch.
    Pretrain(Common),
    /// Supervised trajectory sharpening.
    SharpenSft(Common),
    /// Preference-based trajectory sharpening.
    SharpenRlhf(Common),
    /// Baseline fine-tuning or inference-time search.
    Baseline {
        #[arg(long, value_enum, default_value = "best-of-n")]
        method: BaselineMethod,
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a checkpoint without training.
    Eval {
        /// Checkpoint to evaluate; defaults to `<out>/<id>/model.json`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Sweep one key: `over=trainer.n values=1,2,3 [seeds=0,1,2]`.
    Ablate {
        /// Compare the first two swept values on this summary metric.
        #[arg(long, value_name = "METRIC")]
        compare: Option<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Soak-test an external reward endpoint (the bundled test server by default).
    RewardServerCheck {
        /// Server command line, whitespace separated.
        #[arg(long, conflicts_with = "url")]
        command: Option<String>,
        /// HTTP endpoint URL.
        #[arg(long)]
        url: Option<String>,
        #[arg(long, default_value_t = 1000)]
        requests: usize,
        #[arg(long, default_value_t = 5000)]
        timeout_ms: u64,
    },
    /// Write loss, reward and inference figures for a run directory.
    Plot {
        #[arg(long)]
        run: PathBuf,
    },
}

enum Failure {
    Usage(String),
    Check(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::UnknownKey(_) | Error::UnknownName { .. } => Failure::Usage(e.to_string()),
            other => Failure::Check(other.to_string()),
        }
    }
}

type Outcome = Result<(), Failure>;

fn resolve(common: &Common, kind: Option<&str>) -> Result<ExperimentConfig, Failure> {
    let base = match &common.config {
        // An unreadable config file is a usage error, like a malformed one.
        Some(p) => ExperimentConfig::load(p).map_err(|e| Failure::Usage(e.to_string()))?,
        None => ExperimentConfig::default(),
    };
    let mut cfg = base.with_overrides(&common.overrides)?;
    if let Some(k) = kind {
        cfg.trainer.kind = k.to_string();
    }
    if let Some(s) = common.seed {
        cfg.trainer.seed = s;
    }
    if let Some(o) = &common.out {
        cfg.out_dir = o.clone();
    }
    for c in &common.checks {
        cfg.assertions.push(c.parse::<Assertion>()?);
    }
    println!("{}", cfg.to_json());
    Ok(cfg)
}

fn report_assertions(cfg: &ExperimentConfig, summary: &std::collections::BTreeMap<String, f64>, enforce: bool) -> Outcome {
    let mut failed = Vec::new();
    for a in &cfg.assertions {
        match a.check(summary) {
            Ok(()) => println!("[PASS] {a}"),
            Err(why) => {
                println!("[FAIL] {why}");
                failed.push(why);
            }
        }
    }
    if enforce && !failed.is_empty() {
        return Err(Failure::Check(format!("{} assertion(s) failed", failed.len())));
    }
    Ok(())
}

fn train(common: &Common, kind: Option<&str>) -> Outcome {
    let cfg = resolve(common, kind)?;
    let out = run_experiment(&cfg)?;
    if let Err(e) = plot_emit(&out.dir) {
        log::warn!("no figures: {e}");
    }
    println!("run directory: {}", out.dir.display());
    report_assertions(&cfg, &out.summary, common.assert)
}

fn baseline(method: BaselineMethod, common: &Common) -> Outcome {
    match method {
        BaselineMethod::Standard => train(common, Some("standard")),
        BaselineMethod::DpoVanilla => train(common, Some("dpo-vanilla")),
        BaselineMethod::BestOfN => {
            let cfg = resolve(common, None)?;
            let r = inference_comparison(&cfg)?;
            for m in r.search.iter().chain(std::iter::once(&r.sharpened)) {
                println!(
                    "{:<10} n={:<2} nfe/sample={:<6} mean reward {:.4}",
                    m.method,
                    m.n,
                    m.nfe_per_sample(),
                    sharpening::harness::mean(&m.rewards)
                );
            }
            println!("lower 95% bound on sharpened - best-of-{}: {:.4}", r.compare_n, r.lower_bound);
            println!("cost ratio exact: {}", r.cost_ratio_exact);
            let mut summary = std::collections::BTreeMap::new();
            summary.insert("lower_bound".to_string(), r.lower_bound);
            summary.insert("cost_ratio_exact".to_string(), if r.cost_ratio_exact { 1.0 } else { 0.0 });
            report_assertions(&cfg, &summary, common.assert)
        }
    }
}

fn eval(checkpoint: Option<&Path>, common: &Common) -> Outcome {
    let cfg = resolve(common, None)?;
    let path = checkpoint.map(Path::to_path_buf).unwrap_or_else(|| cfg.run_dir().join("model.json"));
    let metrics = evaluate_checkpoint(&cfg, &path)?;
    for (k, v) in &metrics {
        println!("{k} = {v}");
    }
    report_assertions(&cfg, &metrics, common.assert)
}

fn sweep(compare: Option<&str>, common: &Common) -> Outcome {
    let mut rest = Vec::new();
    let (mut over, mut values, mut seeds) = (None, None, None);
    for o in &common.overrides {
        match o.split_once('=') {
            Some(("over", k)) => over = Some(k.to_string()),
            Some(("values", v)) => values = Some(parse_values(v)),
            Some(("seeds", v)) => {
                let parsed: Result<Vec<u64>, _> = v.split(',').map(|s| s.trim().parse::<u64>()).collect();
                seeds = Some(parsed.map_err(|_| Failure::Usage(format!("bad seeds list `{v}`")))?);
            }
            _ => rest.push(o.clone()),
        }
    }
    let over = over.ok_or_else(|| Failure::Usage("ablate needs over=<key>".into()))?;
    let values = values.ok_or_else(|| Failure::Usage("ablate needs values=<v1,v2,...>".into()))?;
    let common = Common {
        overrides: rest,
        ..common.clone()
    };
    let cfg = resolve(&common, None)?;
    let seeds = seeds.unwrap_or_else(|| vec![cfg.trainer.seed]);
    let report = ablate(&cfg, &over, &values, &seeds)?;
    println!("summary: {}", report.dir.join("summary.csv").display());
    if let Some(metric) = compare {
        let groups = report.by_value(metric);
        if groups.len() >= 2 {
            let (hi, lo) = (&groups[0], &groups[1]);
            let ok = exceeds_by_sd(&hi.1, &lo.1, 3.0);
            println!("{} {over}={} vs {}: {:?} vs {:?}", if ok { "[PASS]" } else { "[FAIL]" }, hi.0, lo.0, hi.1, lo.1);
            if common.assert && !ok {
                return Err(Failure::Check(format!("{metric} did not separate")));
            }
        }
    }
    Ok(())
}

fn test_server() -> Result<Vec<String>, Failure> {
    let exe = std::env::current_exe().map_err(|e| Failure::Check(e.to_string()))?;
    let dir = exe.parent().ok_or_else(|| Failure::Check("executable has no directory".into()))?;
    let server = dir.join(format!("reward_test_server{}", std::env::consts::EXE_SUFFIX));
    if !server.exists() {
        return Err(Failure::Usage(format!("{} not found; pass --command or --url", server.display())));
    }
    Ok(vec![server.display().to_string()])
}

fn server_check(command: Option<&str>, url: Option<&str>, requests: usize, timeout_ms: u64) -> Outcome {
    let endpoint = match (command, url) {
        (_, Some(u)) => Endpoint::Http { url: u.to_string() },
        (Some(c), None) => Endpoint::Subprocess {
            command: c.split_whitespace().map(String::from).collect(),
        },
        (None, None) => Endpoint::Subprocess { command: test_server()? },
    };
    let client = ExternalReward::new(endpoint, timeout_ms);
    let r = soak(&client, requests, 2);
    println!(
        "requests {} ok {} id mismatches {} wrong values {} other errors {}",
        r.requests,
        r.ok,
        r.id_mismatches,
        r.wrong_values,
        r.other_errors.len()
    );
    if let Some(e) = r.other_errors.first() {
        println!("first error: {e}");
    }
    if r.clean() {
        Ok(())
    } else {
        Err(Failure::Check("reward endpoint failed the soak".into()))
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let outcome = match &cli.command {
        Command::Pretrain(c) => train(c, Some("pretrain")),
        Command::SharpenSft(c) => train(c, Some("sft")),
        Command::SharpenRlhf(c) => train(c, Some("rlhf")),
        Command::Baseline { method, common } => baseline(*method, common),
        Command::Eval { checkpoint, common } => eval(checkpoint.as_deref(), common),
        Command::Ablate { compare, common } => sweep(compare.as_deref(), common),
        Command::RewardServerCheck {
            command,
            url,
            requests,
            timeout_ms,
        } => server_check(command.as_deref(), url.as_deref(), *requests, *timeout_ms),
        Command::Plot { run } => plot_emit(run).map(|files| files.iter().for_each(|f| println!("{}", f.display()))).map_err(Failure::from),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Check(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
