//! Reward models. Every reward is "higher is better" and scores samples in
//! raw data coordinates; [`StateReward`] handles the mapping from the
//! standardized space the denoiser works in.

mod external;
mod mixture;
pub mod server;

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;

use gradkit::Array;
use once_cell::sync::Lazy;
use serde::de::DeserializeOwned;
use serde::Deserialize;
use serde_json::Value;

pub use external::{parse_response, soak, Endpoint, ExternalReward, SoakReport, DEFAULT_TIMEOUT_MS};
pub use mixture::MixtureSpec;

use crate::classifier::Classifier;
use crate::data::Affine;
use crate::error::{Error, Result};
use crate::schedules::{estimate_x0, tweedie, Cond, NoisePredictor, Schedule, X0Estimator};

pub trait RewardModel: Send + Sync {
    fn kind(&self) -> &'static str;

    /// Scores one clean sample given in raw coordinates.
    fn score(&self, x: &[f64], c: Cond) -> Result<f64>;

    fn score_rows(&self, x: &Array, conds: &[Cond]) -> Result<Vec<f64>> {
        (0..x.rows()).map(|i| self.score(x.row(i), conds[i])).collect()
    }
}

/// `−‖x − μ*‖²`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModeDistance {
    target: Vec<f64>,
}

impl ModeDistance {
    pub fn new(target: Vec<f64>) -> Self {
        ModeDistance { target }
    }

    pub fn target(&self) -> &[f64] {
        &self.target
    }
}

impl RewardModel for ModeDistance {
    fn kind(&self) -> &'static str {
        "mode_distance"
    }

    fn score(&self, x: &[f64], _c: Cond) -> Result<f64> {
        check_row(x, self.target.len())?;
        Ok(-x.iter().zip(&self.target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
    }
}

/// Log-density of a Gaussian mixture.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetLogPdf {
    mixture: MixtureSpec,
}

impl TargetLogPdf {
    pub fn new(mixture: MixtureSpec) -> Self {
        TargetLogPdf { mixture }
    }
}

impl RewardModel for TargetLogPdf {
    fn kind(&self) -> &'static str {
        "target_logpdf"
    }

    fn score(&self, x: &[f64], _c: Cond) -> Result<f64> {
        check_row(x, self.mixture.dim())?;
        Ok(self.mixture.log_pdf(x))
    }
}

/// Log-probability a trained classifier assigns to the target class. Without
/// a fixed target the sample's condition is used.
#[derive(Clone, Debug)]
pub struct ClassifierReward {
    classifier: Classifier,
    target_class: Option<usize>,
}

impl ClassifierReward {
    pub fn new(classifier: Classifier, target_class: Option<usize>) -> Result<Self> {
        if let Some(k) = target_class {
            if k >= classifier.num_classes() {
                return Err(Error::ConditionOutOfRange {
                    c: k,
                    classes: classifier.num_classes(),
                });
            }
        }
        Ok(ClassifierReward {
            classifier,
            target_class,
        })
    }

    fn target(&self, c: Cond) -> Result<usize> {
        match self.target_class.or(c) {
            Some(k) if k < self.classifier.num_classes() => Ok(k),
            Some(k) => Err(Error::ConditionOutOfRange {
                c: k,
                classes: self.classifier.num_classes(),
            }),
            None => Err(Error::Config("classifier reward needs a target class or a condition".into())),
        }
    }
}

impl RewardModel for ClassifierReward {
    fn kind(&self) -> &'static str {
        "classifier"
    }

    fn score(&self, x: &[f64], c: Cond) -> Result<f64> {
        let k = self.target(c)?;
        let lp = self.classifier.log_probs(&Array::matrix(1, x.len(), x.to_vec())?)?;
        Ok(lp.row(0)[k])
    }

    fn score_rows(&self, x: &Array, conds: &[Cond]) -> Result<Vec<f64>> {
        let lp = self.classifier.log_probs(x)?;
        conds.iter().enumerate().map(|(i, &c)| Ok(lp.row(i)[self.target(c)?])).collect()
    }
}

fn check_row(x: &[f64], dim: usize) -> Result<()> {
    if x.len() != dim {
        return Err(Error::Invalid(format!("reward expects {dim} coordinates, got {}", x.len())));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("reward input is not finite".into()));
    }
    Ok(())
}

/// What reward constructors may draw on besides their own parameters.
#[derive(Clone, Debug, Default)]
pub struct RewardContext {
    /// Generating mixture of the training data, in raw coordinates.
    pub mixture: Option<MixtureSpec>,
}

type RewardCtor = fn(&Value, &RewardContext) -> Result<Box<dyn RewardModel>>;

fn params<T: DeserializeOwned>(kind: &str, spec: &Value) -> Result<T> {
    let mut body = spec.clone();
    if let Some(obj) = body.as_object_mut() {
        obj.remove("kind");
    }
    serde_json::from_value(body).map_err(|e| Error::Config(format!("reward `{kind}`: {e}")))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ModeDistanceParams {
    target: Option<Vec<f64>>,
    mode: Option<usize>,
}

fn build_mode_distance(spec: &Value, ctx: &RewardContext) -> Result<Box<dyn RewardModel>> {
    let p: ModeDistanceParams = params("mode_distance", spec)?;
    let target = match (p.target, p.mode) {
        (Some(t), None) => t,
        (None, Some(k)) => {
            let mix = ctx
                .mixture
                .as_ref()
                .ok_or_else(|| Error::Config("mode_distance by `mode` needs a mixture dataset".into()))?;
            mix.means()
                .get(k)
                .cloned()
                .ok_or_else(|| Error::Config(format!("mode {k} out of range for {} modes", mix.means().len())))?
        }
        _ => return Err(Error::Config("mode_distance needs exactly one of `target` or `mode`".into())),
    };
    Ok(Box::new(ModeDistance::new(target)))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct LogPdfParams {
    mixture: Option<MixtureSpec>,
}

fn build_logpdf(spec: &Value, ctx: &RewardContext) -> Result<Box<dyn RewardModel>> {
    let p: LogPdfParams = params("target_logpdf", spec)?;
    let mixture = p
        .mixture
        .or_else(|| ctx.mixture.clone())
        .ok_or_else(|| Error::Config("target_logpdf needs a mixture".into()))?;
    Ok(Box::new(TargetLogPdf::new(mixture)))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ClassifierParams {
    checkpoint: PathBuf,
    target_class: Option<usize>,
}

fn build_classifier(spec: &Value, _ctx: &RewardContext) -> Result<Box<dyn RewardModel>> {
    let p: ClassifierParams = params("classifier", spec)?;
    let clf = Classifier::load(&p.checkpoint)?;
    Ok(Box::new(ClassifierReward::new(clf, p.target_class)?))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ExternalParams {
    endpoint: Endpoint,
    #[serde(default = "default_timeout")]
    timeout_ms: u64,
}

fn default_timeout() -> u64 {
    DEFAULT_TIMEOUT_MS
}

fn build_external(spec: &Value, _ctx: &RewardContext) -> Result<Box<dyn RewardModel>> {
    let p: ExternalParams = params("external", spec)?;
    Ok(Box::new(ExternalReward::new(p.endpoint, p.timeout_ms)))
}

static REWARDS: Lazy<BTreeMap<&'static str, RewardCtor>> = Lazy::new(|| {
    let mut map: BTreeMap<&'static str, RewardCtor> = BTreeMap::new();
    map.insert("mode_distance", build_mode_distance);
    map.insert("target_logpdf", build_logpdf);
    map.insert("classifier", build_classifier);
    map.insert("external", build_external);
    map
});

pub fn reward_kinds() -> Vec<&'static str> {
    REWARDS.keys().copied().collect()
}

/// Builds a reward from a JSON spec such as
/// `{"kind": "mode_distance", "mode": 0}`.
pub fn build_reward(spec: &Value, ctx: &RewardContext) -> Result<Arc<dyn RewardModel>> {
    let kind = spec
        .get("kind")
        .and_then(Value::as_str)
        .ok_or_else(|| Error::Config("reward spec needs a string `kind`".into()))?;
    let ctor = REWARDS.get(kind).ok_or_else(|| Error::UnknownName {
        what: "reward",
        name: kind.to_string(),
        known: reward_kinds().join(", "),
    })?;
    Ok(Arc::from(ctor(spec, ctx)?))
}

/// Scores clean samples in raw coordinates.
pub fn reward_clean(model: &dyn RewardModel, x0_hat: &Array, conds: &[Cond]) -> Result<Vec<f64>> {
    if !x0_hat.is_finite() {
        return Err(Error::Numerical("clean-sample estimate is not finite".into()));
    }
    if conds.len() != x0_hat.rows() {
        return Err(Error::Invalid(format!("{} rows but {} conditions", x0_hat.rows(), conds.len())));
    }
    model.score_rows(x0_hat, conds)
}

/// Scores noisy states through their clean-sample estimates.
pub fn reward_state(
    model: &dyn RewardModel,
    affine: &Affine,
    x_t: &Array,
    t: usize,
    conds: &[Cond],
    predictor: &dyn NoisePredictor,
    schedule: &Schedule,
    estimator: X0Estimator,
) -> Result<Vec<f64>> {
    let x0 = estimate_x0(x_t, t, conds, predictor, schedule, estimator)?;
    reward_clean(model, &affine.to_raw(&x0), conds)
}

/// A reward bound to the standardization of the model's data space and to a
/// clean-sample estimator.
#[derive(Clone)]
pub struct StateReward {
    pub model: Arc<dyn RewardModel>,
    pub affine: Affine,
    pub estimator: X0Estimator,
}

impl StateReward {
    pub fn new(model: Arc<dyn RewardModel>, affine: Affine, estimator: X0Estimator) -> Self {
        StateReward {
            model,
            affine,
            estimator,
        }
    }

    /// Scores standardized clean samples.
    pub fn clean(&self, z: &Array, conds: &[Cond]) -> Result<Vec<f64>> {
        reward_clean(self.model.as_ref(), &self.affine.to_raw(z), conds)
    }

    /// Scores one standardized noisy row whose noise prediction is already
    /// known; only valid for the Tweedie estimator.
    pub fn with_eps(&self, x_t: &Array, eps: &Array, t: usize, conds: &[Cond], schedule: &Schedule) -> Result<Vec<f64>> {
        self.clean(&tweedie(x_t, eps, t, schedule)?, conds)
    }

    pub fn state(&self, x_t: &Array, t: usize, conds: &[Cond], predictor: &dyn NoisePredictor, schedule: &Schedule) -> Result<Vec<f64>> {
        reward_state(self.model.as_ref(), &self.affine, x_t, t, conds, predictor, schedule, self.estimator)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn gmm2() -> RewardContext {
        RewardContext {
            mixture: Some(MixtureSpec::new(vec![vec![2.0, 0.0], vec![-2.0, 0.0]], 0.2, vec![0.5, 0.5]).unwrap()),
        }
    }

    #[test]
    fn mode_distance_peaks_at_target() {
        let r = build_reward(&json!({"kind": "mode_distance", "mode": 0}), &gmm2()).unwrap();
        assert_eq!(r.score(&[2.0, 0.0], None).unwrap(), 0.0);
        assert_eq!(r.score(&[1.0, 1.0], None).unwrap(), -2.0);
        let r = build_reward(&json!({"kind": "mode_distance", "target": [0.0, 1.0]}), &gmm2()).unwrap();
        assert_eq!(r.score(&[0.0, 1.0], None).unwrap(), 0.0);
    }

    #[test]
    fn spec_validation() {
        let ctx = gmm2();
        assert!(matches!(build_reward(&json!({"kind": "clip"}), &ctx), Err(Error::UnknownName { .. })));
        assert!(build_reward(&json!({"kind": "mode_distance"}), &ctx).is_err());
        assert!(build_reward(&json!({"kind": "mode_distance", "mode": 5}), &ctx).is_err());
        assert!(build_reward(&json!({"kind": "mode_distance", "mode": 0, "extra": 1}), &ctx).is_err());
        assert!(build_reward(&json!({"kind": "classifier", "checkpoint": "/nonexistent.json"}), &ctx).is_err());
        assert!(build_reward(&json!({"kind": "target_logpdf"}), &RewardContext::default()).is_err());
    }

    #[test]
    fn rejects_non_finite_input() {
        let r = ModeDistance::new(vec![0.0, 0.0]);
        let x = Array::matrix(1, 2, vec![f64::NAN, 0.0]).unwrap();
        assert!(reward_clean(&r, &x, &[None]).is_err());
    }

    #[test]
    fn mixture_density_normalizes() {
        let r = build_reward(&json!({"kind": "target_logpdf"}), &gmm2()).unwrap();
        let h = 0.01;
        let mut total = 0.0;
        for i in 0..800 {
            for j in 0..300 {
                let x = [-4.0 + (i as f64 + 0.5) * h, -1.5 + (j as f64 + 0.5) * h];
                total += r.score(&x, None).unwrap().exp() * h * h;
            }
        }
        assert!((total - 1.0).abs() < 1e-3, "{total}");
    }
}
