//! Named parameter sets and the AdamW update.

use serde::{Deserialize, Serialize};

use crate::array::Array;
use crate::error::{GradError, Result};

/// An ordered collection of named parameter arrays.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Array>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, value: Array) -> usize {
        self.names.push(name.into());
        self.values.push(value);
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Array] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Array] {
        &mut self.values
    }

    pub fn get(&self, i: usize) -> &Array {
        &self.values[i]
    }

    pub fn by_name(&self, name: &str) -> Option<&Array> {
        self.names.iter().position(|n| n == name).map(|i| &self.values[i])
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Array::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(Array::is_finite)
    }

    /// Moves every value a fraction `rate` of the way toward `target`;
    /// the update of an exponential moving average of weights.
    pub fn ema_toward(&mut self, target: &ParamSet, rate: f64) -> Result<()> {
        if self.names != target.names {
            return Err(GradError::InvalidArgument("parameter sets differ in layout".into()));
        }
        for (a, b) in self.values.iter_mut().zip(&target.values) {
            if a.shape() != b.shape() {
                return Err(GradError::ShapeMismatch {
                    op: "ema_toward",
                    lhs: a.shape().to_vec(),
                    rhs: b.shape().to_vec(),
                });
            }
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += rate * (y - *x);
            }
        }
        Ok(())
    }
}

impl Default for ParamSet {
    fn default() -> Self {
        Self::new()
    }
}

/// Hyperparameters of the decoupled-weight-decay Adam update.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    /// β1 = 0, β2 = 0.99 and no weight decay; the learning rate is left to the
    /// experiment.
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-3,
            beta1: 0.0,
            beta2: 0.99,
            epsilon: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Learning rate as a function of the step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Half-cosine from the base rate down to 1% of it at the last step.
    Cosine,
}

impl LrSchedule {
    /// Rate for 0-based `step` of `total`.
    pub fn at(self, base: f64, step: usize, total: usize) -> f64 {
        match self {
            LrSchedule::Constant => base,
            LrSchedule::Cosine => {
                let floor = 0.01 * base;
                let frac = if total > 1 { step as f64 / (total - 1) as f64 } else { 1.0 };
                floor + (base - floor) * 0.5 * (1.0 + (std::f64::consts::PI * frac.min(1.0)).cos())
            }
        }
    }
}

/// First and second moment accumulators, one per parameter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimState {
    first: Vec<Array>,
    second: Vec<Array>,
    step: u64,
}

impl OptimState {
    pub fn new(params: &ParamSet) -> Self {
        let zeros = |a: &Array| Array::zeros(a.shape()).expect("parameter shapes are valid");
        OptimState {
            first: params.values().iter().map(zeros).collect(),
            second: params.values().iter().map(zeros).collect(),
            step: 0,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Array] {
        &self.first
    }

    pub fn second_moments(&self) -> &[Array] {
        &self.second
    }
}

/// Applies one AdamW update in place.
///
/// All gradients are validated before any parameter is touched, so a
/// non-finite gradient leaves both `params` and `state` unchanged.
pub fn adamw_step(params: &mut ParamSet, grads: &[Array], state: &mut OptimState, cfg: &AdamWConfig) -> Result<()> {
    if !(cfg.lr > 0.0) {
        return Err(GradError::InvalidArgument(format!("learning rate must be positive, got {}", cfg.lr)));
    }
    if !(0.0..1.0).contains(&cfg.beta1) || !(0.0..1.0).contains(&cfg.beta2) {
        return Err(GradError::InvalidArgument(format!(
            "betas must lie in [0, 1), got ({}, {})",
            cfg.beta1, cfg.beta2
        )));
    }
    if grads.len() != params.len() || state.first.len() != params.len() {
        return Err(GradError::InvalidArgument(format!(
            "{} parameters, {} gradients, {} optimizer slots",
            params.len(),
            grads.len(),
            state.first.len()
        )));
    }
    for (i, (p, g)) in params.values().iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || state.first[i].shape() != p.shape() {
            return Err(GradError::ShapeMismatch {
                op: "adamw_step",
                lhs: p.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        if !g.is_finite() {
            return Err(GradError::NonFiniteGradient {
                name: params.names()[i].clone(),
            });
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let bias1 = 1.0 - cfg.beta1.powi(t);
    let bias2 = 1.0 - cfg.beta2.powi(t);
    for (i, p) in params.values_mut().iter_mut().enumerate() {
        let g = grads[i].data();
        let m = state.first[i].data_mut();
        let v = state.second[i].data_mut();
        for (j, w) in p.data_mut().iter_mut().enumerate() {
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
            let m_hat = m[j] / bias1;
            let v_hat = v[j] / bias2;
            *w -= cfg.lr * (m_hat / (v_hat.sqrt() + cfg.epsilon) + cfg.weight_decay * *w);
        }
    }
    Ok(())
}
