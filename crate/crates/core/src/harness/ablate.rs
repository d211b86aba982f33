//! Sweeps of one config key over values and seeds.

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde_json::Value;

use crate::error::{Error, Result};
use crate::harness::config::{parse_value, set_path, ExperimentConfig};
use crate::harness::metrics::{mean, std_dev};
use crate::harness::run::run_experiment;

#[derive(Clone, Debug, PartialEq)]
pub struct ChildRun {
    pub value: Value,
    pub seed: u64,
    pub dir: PathBuf,
    pub summary: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationReport {
    pub key: String,
    pub children: Vec<ChildRun>,
    pub dir: PathBuf,
}

impl AblationReport {
    /// Values of `metric` across seeds for each swept value, in sweep order.
    pub fn by_value(&self, metric: &str) -> Vec<(Value, Vec<f64>)> {
        let mut out: Vec<(Value, Vec<f64>)> = Vec::new();
        for c in &self.children {
            let v = c.summary.get(metric).copied().unwrap_or(f64::NAN);
            match out.iter_mut().find(|(val, _)| *val == c.value) {
                Some((_, xs)) => xs.push(v),
                None => out.push((c.value.clone(), vec![v])),
            }
        }
        out
    }
}

fn label(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// Parses the comma-separated `values=` list of a sweep.
pub fn parse_values(raw: &str) -> Vec<Value> {
    raw.split(',').map(str::trim).filter(|s| !s.is_empty()).map(parse_value).collect()
}

/// The child config for one sweep point. A preference trainer swept to a
/// single candidate has no pair to compare, so it runs as the two-candidate
/// unmodulated preference baseline instead.
pub fn child_config(base: &ExperimentConfig, key: &str, value: &Value, seed: u64) -> Result<ExperimentConfig> {
    let mut tree = serde_json::to_value(base)?;
    set_path(&mut tree, key, value.clone())?;
    let mut cfg: ExperimentConfig = serde_json::from_value(tree).map_err(|e| Error::Config(e.to_string()))?;
    cfg.trainer.seed = seed;
    cfg.eval.seed = seed;
    if cfg.trainer.kind == "rlhf" && cfg.trainer.n == 1 {
        cfg.trainer.kind = "dpo-vanilla".into();
    }
    cfg.out_dir = base.run_dir();
    cfg.id = format!("{}={}/seed{seed}", key, label(value));
    Ok(cfg)
}

/// Runs every (value, seed) child of the sweep in order, then writes
/// `summary.csv` (one row per child) and `aggregate.csv` (mean and sample
/// std per value and metric) under the parent run directory.
pub fn ablate(base: &ExperimentConfig, key: &str, values: &[Value], seeds: &[u64]) -> Result<AblationReport> {
    if values.is_empty() || seeds.is_empty() {
        return Err(Error::Config("an ablation needs at least one value and one seed".into()));
    }
    let configs = values
        .iter()
        .flat_map(|v| seeds.iter().map(move |&s| (v, s)))
        .map(|(v, s)| child_config(base, key, v, s))
        .collect::<Result<Vec<_>>>()?;
    let mut children = Vec::with_capacity(configs.len());
    for (cfg, (v, s)) in configs.iter().zip(values.iter().flat_map(|v| seeds.iter().map(move |&s| (v, s)))) {
        let out = run_experiment(cfg)?;
        children.push(ChildRun {
            value: v.clone(),
            seed: s,
            dir: out.dir,
            summary: out.summary,
        });
    }
    let report = AblationReport {
        key: key.to_string(),
        children,
        dir: base.run_dir(),
    };
    write_tables(&report)?;
    Ok(report)
}

fn write_tables(report: &AblationReport) -> Result<()> {
    let metrics: Vec<String> = report
        .children
        .iter()
        .flat_map(|c| c.summary.keys().cloned())
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut w = csv::Writer::from_path(report.dir.join("summary.csv"))?;
    let mut header = vec![report.key.clone(), "seed".into()];
    header.extend(metrics.iter().cloned());
    w.write_record(&header)?;
    for c in &report.children {
        let mut row = vec![label(&c.value), c.seed.to_string()];
        row.extend(metrics.iter().map(|m| c.summary.get(m).map(|v| v.to_string()).unwrap_or_default()));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(report.dir.join("summary.csv"), e))?;

    let mut w = csv::Writer::from_path(report.dir.join("aggregate.csv"))?;
    w.write_record([report.key.as_str(), "metric", "mean", "std", "runs"])?;
    for m in &metrics {
        for (v, xs) in report.by_value(m) {
            w.write_record([label(&v), m.clone(), mean(&xs).to_string(), std_dev(&xs).to_string(), xs.len().to_string()])?;
        }
    }
    w.flush().map_err(|e| Error::io(report.dir.join("aggregate.csv"), e))
}

/// Whether `hi` beats `lo` by at least `k` times the larger run-to-run
/// standard deviation of the two.
pub fn exceeds_by_sd(hi: &[f64], lo: &[f64], k: f64) -> bool {
    let gap = mean(hi) - mean(lo);
    gap > 0.0 && gap >= k * std_dev(hi).max(std_dev(lo))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn children_get_seed_and_fallback() {
        let base = ExperimentConfig::default();
        let c = child_config(&base, "trainer.n", &Value::from(1), 7).unwrap();
        assert_eq!((c.trainer.kind.as_str(), c.trainer.seed), ("dpo-vanilla", 7));
        assert!(c.run_dir().ends_with("run/trainer.n=1/seed7"));
        let c = child_config(&base, "trainer.n", &Value::from(3), 1).unwrap();
        assert_eq!((c.trainer.kind.as_str(), c.trainer.n), ("rlhf", 3));
        assert!(child_config(&base, "trainer.nope", &Value::from(3), 1).is_err());
        assert_eq!(parse_values("1, 2,x"), vec![Value::from(1), Value::from(2), Value::from("x")]);
    }

    #[test]
    fn sd_test() {
        assert!(exceeds_by_sd(&[10.0, 10.1, 9.9], &[1.0, 1.1, 0.9], 3.0));
        assert!(!exceeds_by_sd(&[1.0, 3.0], &[0.0, 2.0], 3.0));
    }
}
