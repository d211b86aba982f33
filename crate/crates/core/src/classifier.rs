//! Small MLP classifier trained on labeled synthetic data; backs the
//! classifier reward.

use std::path::Path;

use gradkit::{adamw_step, AdamWConfig, Array, OptimState, ParamSet, Tape, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{Affine, Dataset};
use crate::error::{Error, Result};
use crate::rng::seeded;

const FORMAT: &str = "sharpening.classifier";
/// Training is rejected below this held-out accuracy.
pub const MIN_ACCURACY: f64 = 0.90;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierConfig {
    pub hidden: usize,
    pub layers: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub held_out: usize,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            hidden: 64,
            layers: 2,
            steps: 1500,
            batch_size: 128,
            lr: 3e-3,
            seed: 0,
            held_out: 2000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Classifier {
    num_classes: usize,
    /// Maps raw inputs to the standardized space the network was trained in.
    affine: Affine,
    params: ParamSet,
    held_out_accuracy: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Checkpoint {
    format: String,
    hash: String,
    classifier: Classifier,
}

fn init(rng: &mut crate::rng::SeededRng, fan_in: usize, fan_out: usize) -> Array {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| rng.gen_range(-limit..=limit)).collect();
    Array::matrix(fan_in, fan_out, data).expect("positive dims")
}

impl Classifier {
    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn held_out_accuracy(&self) -> f64 {
        self.held_out_accuracy
    }

    fn logits(&self, tape: &mut Tape, params: &[Var], x: Var) -> Result<Var> {
        let n = params.len() / 2;
        let mut h = x;
        for l in 0..n {
            let z = tape.matmul(h, params[2 * l])?;
            let z = tape.add(z, params[2 * l + 1])?;
            h = if l + 1 < n { tape.silu(z)? } else { z };
        }
        Ok(h)
    }

    /// Row-wise log-softmax, composed from primitives with a constant max shift.
    fn log_softmax(tape: &mut Tape, logits: Var) -> Result<Var> {
        let v = tape.value(logits);
        let maxes: Vec<f64> = (0..v.rows())
            .map(|i| v.row(i).iter().copied().fold(f64::NEG_INFINITY, f64::max))
            .collect();
        let m = tape.var(Array::matrix(maxes.len(), 1, maxes)?);
        let shifted = tape.sub(logits, m)?;
        let e = tape.exp(shifted)?;
        let s = tape.row_sum(e)?;
        let ls = tape.log(s)?;
        Ok(tape.sub(shifted, ls)?)
    }

    fn leaves(&self, tape: &mut Tape) -> Vec<Var> {
        self.params.values().iter().map(|p| tape.var(p.clone())).collect()
    }

    /// Log class probabilities for standardized inputs, `[rows, K]`.
    fn log_probs_standardized(&self, z: &Array) -> Result<Array> {
        let mut tape = Tape::new();
        let params = self.leaves(&mut tape);
        let x = tape.var(z.clone());
        let logits = self.logits(&mut tape, &params, x)?;
        let lp = Self::log_softmax(&mut tape, logits)?;
        Ok(tape.value(lp).clone())
    }

    /// Log class probabilities for raw-coordinate inputs, `[rows, K]`.
    pub fn log_probs(&self, raw: &Array) -> Result<Array> {
        if raw.cols() != self.affine.dim() {
            return Err(Error::Invalid(format!(
                "classifier expects {} columns, got {}",
                self.affine.dim(),
                raw.cols()
            )));
        }
        self.log_probs_standardized(&self.affine.standardize(raw))
    }

    fn accuracy(&self, data: &Dataset) -> Result<f64> {
        let labels = data.labels().ok_or_else(|| Error::Invalid("accuracy needs labels".into()))?;
        let lp = self.log_probs_standardized(data.samples())?;
        let correct = (0..lp.rows())
            .filter(|&i| {
                let row = lp.row(i);
                let arg = (0..row.len()).fold(0, |b, j| if row[j] > row[b] { j } else { b });
                arg == labels[i]
            })
            .count();
        Ok(correct as f64 / lp.rows() as f64)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let body = serde_json::to_string(self)?;
        let ckpt = Checkpoint {
            format: FORMAT.into(),
            hash: hex::encode(Sha256::digest(body.as_bytes())),
            classifier: self.clone(),
        };
        std::fs::write(path, serde_json::to_string(&ckpt)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bad = |reason: String| Error::Checkpoint {
            path: path.to_path_buf(),
            reason,
        };
        let text = std::fs::read_to_string(path).map_err(|e| bad(e.to_string()))?;
        let ckpt: Checkpoint = serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
        if ckpt.format != FORMAT {
            return Err(bad(format!("unexpected format {}", ckpt.format)));
        }
        let body = serde_json::to_string(&ckpt.classifier)?;
        if hex::encode(Sha256::digest(body.as_bytes())) != ckpt.hash {
            return Err(bad("hash mismatch".into()));
        }
        Ok(ckpt.classifier)
    }
}

/// Trains a cross-entropy MLP on a labeled dataset and checks it on a fresh
/// held-out draw of the same kind.
pub fn train_classifier(dataset: &Dataset, cfg: &ClassifierConfig) -> Result<Classifier> {
    let labels = dataset
        .labels()
        .ok_or_else(|| Error::Invalid(format!("dataset `{}` has no labels", dataset.spec().kind)))?;
    let k = dataset.num_classes();
    let mut rng = seeded(cfg.seed);
    let mut params = ParamSet::new();
    let mut fan_in = dataset.dim();
    for l in 0..cfg.layers {
        params.push(format!("hidden{l}.weight"), init(&mut rng, fan_in, cfg.hidden));
        params.push(format!("hidden{l}.bias"), Array::zeros(&[1, cfg.hidden])?);
        fan_in = cfg.hidden;
    }
    params.push("out.weight", init(&mut rng, fan_in, k));
    params.push("out.bias", Array::zeros(&[1, k])?);
    let mut clf = Classifier {
        num_classes: k,
        affine: dataset.affine().clone(),
        params,
        held_out_accuracy: 0.0,
    };
    let adam = AdamWConfig {
        lr: cfg.lr,
        ..AdamWConfig::default()
    };
    let mut optim = OptimState::new(&clf.params);
    let b = cfg.batch_size;
    for _ in 0..cfg.steps {
        let idx: Vec<usize> = (0..b).map(|_| rng.gen_range(0..dataset.len())).collect();
        let x = dataset.samples().select_rows(&idx)?;
        let mut onehot = vec![0.0; b * k];
        for (r, &i) in idx.iter().enumerate() {
            onehot[r * k + labels[i]] = 1.0;
        }
        let mut tape = Tape::new();
        let pv = clf.leaves(&mut tape);
        let xv = tape.var(x);
        let logits = clf.logits(&mut tape, &pv, xv)?;
        let lp = Classifier::log_softmax(&mut tape, logits)?;
        let oh = tape.var(Array::matrix(b, k, onehot)?);
        let picked = tape.mul(lp, oh)?;
        let s = tape.sum(picked)?;
        let loss = tape.scale(s, -1.0 / b as f64)?;
        let mut g = tape.backward_scalar(loss)?;
        let grads: Vec<Array> = pv.iter().map(|&p| g.take(p)).collect();
        adamw_step(&mut clf.params, &grads, &mut optim, &adam)?;
    }
    let held = dataset.held_out(cfg.held_out, cfg.seed.wrapping_add(0x5eed))?;
    clf.held_out_accuracy = clf.accuracy(&held)?;
    if clf.held_out_accuracy < MIN_ACCURACY {
        return Err(Error::Numerical(format!(
            "classifier reached only {:.3} held-out accuracy (need {MIN_ACCURACY})",
            clf.held_out_accuracy
        )));
    }
    Ok(clf)
}
