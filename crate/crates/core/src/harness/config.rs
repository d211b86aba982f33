//! Experiment configuration, dotted-path overrides and summary assertions.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::denoiser::{DenoiserConfig, PretrainConfig};
use crate::error::{Error, Result};
use crate::schedules::Cond;
use crate::trajectory::TrainConfig;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub kind: String,
    pub n: usize,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            kind: "gmm2".into(),
            n: 20_000,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Evaluate every this many steps; 0 evaluates at start and end only.
    pub every: usize,
    /// Generated samples per evaluation.
    pub samples: usize,
    /// Fresh data drawn for the MMD reference and the loss probe.
    pub held_out: usize,
    pub seed: u64,
    pub mmd: bool,
    /// Mode-assignment radius in mixture standard deviations.
    pub mode_radius: f64,
    /// Condition for generated samples; `None` samples unconditionally.
    pub condition: Cond,
    /// Registered sampler used to draw evaluation samples.
    pub sampler: String,
    /// Held-out rows in the fixed ε-regression probe; 0 disables it.
    pub probe: usize,
    /// Dump candidate trajectories every this many steps; 0 disables.
    pub trajectory_dump_every: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            every: 0,
            samples: 2000,
            held_out: 2000,
            seed: 0,
            mmd: true,
            mode_radius: 3.0,
            condition: None,
            sampler: "ddim".into(),
            probe: 512,
            trajectory_dump_every: 50,
        }
    }
}

/// Best-of-n search on a base model against plain sampling from a sharpened one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineConfig {
    pub base_checkpoint: Option<PathBuf>,
    pub sharpened_checkpoint: Option<PathBuf>,
    pub ns: Vec<usize>,
    pub prompts: usize,
    pub seed: u64,
    /// The search width the sharpened model is tested against.
    pub compare_n: usize,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig {
            base_checkpoint: None,
            sharpened_checkpoint: None,
            ns: vec![1, 2, 4, 8],
            prompts: 500,
            seed: 0,
            compare_n: 4,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CmpOp {
    #[serde(rename = "<")]
    Lt,
    #[serde(rename = "<=")]
    Le,
    #[serde(rename = ">")]
    Gt,
    #[serde(rename = ">=")]
    Ge,
}

impl CmpOp {
    pub fn holds(self, lhs: f64, rhs: f64) -> bool {
        match self {
            CmpOp::Lt => lhs < rhs,
            CmpOp::Le => lhs <= rhs,
            CmpOp::Gt => lhs > rhs,
            CmpOp::Ge => lhs >= rhs,
        }
    }

    fn symbol(self) -> &'static str {
        match self {
            CmpOp::Lt => "<",
            CmpOp::Le => "<=",
            CmpOp::Gt => ">",
            CmpOp::Ge => ">=",
        }
    }
}

/// A check on one summary metric, e.g. `final.mode_fraction_0 >= 0.9`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Assertion {
    pub metric: String,
    pub op: CmpOp,
    pub value: f64,
}

impl fmt::Display for Assertion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} {}", self.metric, self.op.symbol(), self.value)
    }
}

impl FromStr for Assertion {
    type Err = Error;

    /// Parses `metric<op>value` with op one of `<=`, `>=`, `<`, `>`.
    fn from_str(s: &str) -> Result<Self> {
        for (sym, op) in [("<=", CmpOp::Le), (">=", CmpOp::Ge), ("<", CmpOp::Lt), (">", CmpOp::Gt)] {
            if let Some((m, v)) = s.split_once(sym) {
                let value = v
                    .trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("assertion `{s}`: `{v}` is not a number")))?;
                return Ok(Assertion {
                    metric: m.trim().to_string(),
                    op,
                    value,
                });
            }
        }
        Err(Error::Config(format!("assertion `{s}` has no comparison operator")))
    }
}

impl Assertion {
    /// `Ok(())` when it holds, otherwise a description of the failure.
    pub fn check(&self, summary: &BTreeMap<String, f64>) -> std::result::Result<(), String> {
        match summary.get(&self.metric) {
            None => Err(format!("{self}: metric not in summary")),
            Some(&v) if self.op.holds(v, self.value) => Ok(()),
            Some(&v) => Err(format!("{self}: observed {v}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub version: u32,
    pub id: String,
    pub dataset: DatasetConfig,
    pub model: DenoiserConfig,
    /// Starting weights for fine-tuning. When the file is missing it is
    /// created by pretraining with `base`, so it doubles as a cache.
    pub init_checkpoint: Option<PathBuf>,
    pub base: PretrainConfig,
    pub trainer: TrainConfig,
    pub reward: Option<Value>,
    pub eval: EvalConfig,
    pub baseline: BaselineConfig,
    pub assertions: Vec<Assertion>,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            version: CONFIG_VERSION,
            id: "run".into(),
            dataset: DatasetConfig::default(),
            model: DenoiserConfig::default(),
            init_checkpoint: None,
            base: PretrainConfig::default(),
            trainer: TrainConfig::default(),
            reward: None,
            eval: EvalConfig::default(),
            baseline: BaselineConfig::default(),
            assertions: Vec::new(),
            out_dir: PathBuf::from("runs"),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.check_version()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    fn check_version(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!("config version {} unsupported (expected {CONFIG_VERSION})", self.version)));
        }
        Ok(())
    }

    /// Directory of this run: `out_dir/id`.
    pub fn run_dir(&self) -> PathBuf {
        self.out_dir.join(&self.id)
    }

    /// Applies `key=value` overrides addressed by dotted paths. Every path
    /// must name a key the serialized config already has. Values are read
    /// as JSON, falling back to a plain string.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut tree = serde_json::to_value(self)?;
        for o in overrides {
            let o = o.as_ref();
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
            set_path(&mut tree, key, parse_value(raw))?;
        }
        let cfg: ExperimentConfig = serde_json::from_value(tree).map_err(|e| Error::Config(e.to_string()))?;
        cfg.check_version()?;
        Ok(cfg)
    }
}

pub fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Replaces the value at a dotted path; unknown keys are rejected.
pub fn set_path(tree: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut node = tree;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node.as_object_mut().ok_or_else(|| Error::UnknownKey(key.to_string()))?;
        let child = obj.get_mut(*part).ok_or_else(|| Error::UnknownKey(key.to_string()))?;
        if i + 1 == parts.len() {
            *child = value;
            return Ok(());
        }
        node = child;
    }
    Err(Error::UnknownKey(key.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_touch_only_known_keys() {
        let cfg = ExperimentConfig::default();
        let c = cfg
            .with_overrides(&["trainer.n=5", "id=abc", "trainer.condition=0", "eval.mmd=false"])
            .unwrap();
        assert_eq!((c.trainer.n, c.id.as_str(), c.trainer.condition, c.eval.mmd), (5, "abc", Some(0), false));
        match cfg.with_overrides(&["trainer.bogus=1"]) {
            Err(Error::UnknownKey(k)) => assert_eq!(k, "trainer.bogus"),
            other => panic!("{other:?}"),
        }
        assert!(matches!(cfg.with_overrides(&["trainer.n.x=1"]), Err(Error::UnknownKey(_))));
        assert!(matches!(cfg.with_overrides(&["trainer.n=abc"]), Err(Error::Config(_))));
    }

    #[test]
    fn round_trip_and_unknown_fields() {
        let cfg = ExperimentConfig::default();
        assert_eq!(ExperimentConfig::from_json(&cfg.to_json()).unwrap(), cfg);
        assert!(ExperimentConfig::from_json(r#"{"nope": 1}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"version": 2}"#).is_err());
    }

    #[test]
    fn assertions_parse_and_check() {
        let a: Assertion = "final.mmd2 < 0.05".parse().unwrap();
        assert_eq!(a.op, CmpOp::Lt);
        let a2: Assertion = "x>=1".parse().unwrap();
        let mut s = BTreeMap::new();
        s.insert("final.mmd2".to_string(), 0.01);
        assert!(a.check(&s).is_ok());
        assert!(a2.check(&s).is_err());
        assert!("x ~ 1".parse::<Assertion>().is_err());
    }
}
