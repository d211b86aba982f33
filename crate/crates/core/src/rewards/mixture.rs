use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Isotropic Gaussian mixture with a shared standard deviation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, try_from = "RawMixture", into = "RawMixture")]
pub struct MixtureSpec {
    means: Vec<Vec<f64>>,
    std: f64,
    weights: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMixture {
    means: Vec<Vec<f64>>,
    std: f64,
    weights: Vec<f64>,
}

impl TryFrom<RawMixture> for MixtureSpec {
    type Error = Error;

    fn try_from(r: RawMixture) -> Result<Self> {
        MixtureSpec::new(r.means, r.std, r.weights)
    }
}

impl From<MixtureSpec> for RawMixture {
    fn from(m: MixtureSpec) -> Self {
        RawMixture {
            means: m.means,
            std: m.std,
            weights: m.weights,
        }
    }
}

impl MixtureSpec {
    pub fn new(means: Vec<Vec<f64>>, std: f64, weights: Vec<f64>) -> Result<Self> {
        if means.is_empty() || means.len() != weights.len() {
            return Err(Error::Config(format!(
                "mixture needs one weight per mean, got {} means and {} weights",
                means.len(),
                weights.len()
            )));
        }
        let dim = means[0].len();
        if dim == 0 || means.iter().any(|m| m.len() != dim) {
            return Err(Error::Config("mixture means must share a positive dimension".into()));
        }
        if !(std > 0.0) {
            return Err(Error::Config(format!("mixture std must be positive, got {std}")));
        }
        if weights.iter().any(|&w| !(w >= 0.0)) || (weights.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
            return Err(Error::Config("mixture weights must be a probability vector".into()));
        }
        Ok(MixtureSpec { means, std, weights })
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    pub fn std(&self) -> f64 {
        self.std
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    /// `log Σ_k w_k N(x; μ_k, std²·I)`, evaluated with log-sum-exp.
    pub fn log_pdf(&self, x: &[f64]) -> f64 {
        let d = self.dim() as f64;
        let var = self.std * self.std;
        let norm = -0.5 * d * (2.0 * std::f64::consts::PI * var).ln();
        let terms: Vec<f64> = self
            .means
            .iter()
            .zip(&self.weights)
            .map(|(m, w)| {
                let sq: f64 = x.iter().zip(m).map(|(a, b)| (a - b) * (a - b)).sum();
                w.ln() + norm - 0.5 * sq / var
            })
            .collect();
        let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return max;
        }
        max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_normal_at_origin() {
        let m = MixtureSpec::new(vec![vec![0.0, 0.0]], 1.0, vec![1.0]).unwrap();
        assert!((m.log_pdf(&[0.0, 0.0]) + (2.0 * std::f64::consts::PI).ln()).abs() < 1e-12);
        assert!((m.log_pdf(&[0.0, 0.0]) + 1.8379).abs() < 1e-4);
    }

    #[test]
    fn validation() {
        assert!(MixtureSpec::new(vec![vec![0.0]], 0.0, vec![1.0]).is_err());
        assert!(MixtureSpec::new(vec![vec![0.0], vec![1.0]], 1.0, vec![0.5, 0.6]).is_err());
        assert!(MixtureSpec::new(vec![vec![0.0], vec![1.0, 2.0]], 1.0, vec![0.5, 0.5]).is_err());
        let json = r#"{"means":[[0.0]],"std":1.0,"weights":[0.9]}"#;
        assert!(serde_json::from_str::<MixtureSpec>(json).is_err());
    }
}
