//! Deterministic synthetic 2-D datasets, standardized per axis.
//!
//! | kind | construction | labels |
//! |------|--------------|--------|
//! | `gmm2` | two isotropic Gaussians at (2, 0) and (−2, 0), std 0.2 | 0, 1 |
//! | `gmm8` | eight Gaussians on a radius-4 circle, std 0.3 | 0..8 |
//! | `swissroll` | `t·(cos t, sin t)`, `t ∈ [1.5π, 4.5π]`, scaled by 4/4.5π, noise 0.1 | none |
//! | `checkerboard` | 8 filled cells of a 4×4 board on `[−2.8, 2.8]²` | none |
//!
//! Stored samples are standardized to zero mean and unit per-axis variance;
//! the affine map is kept in the [`DatasetSpec`] so raw coordinates can be
//! recovered.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use gradkit::Array;
use once_cell::sync::Lazy;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rewards::MixtureSpec;
use crate::rng::{seeded, SeededRng};

pub const GMM2_STD: f64 = 0.2;
pub const GMM8_STD: f64 = 0.3;
pub const GMM8_RADIUS: f64 = 4.0;
const SWISSROLL_NOISE: f64 = 0.1;
const CHECKER_SCALE: f64 = 1.4;

/// A family of synthetic distributions.
pub trait DatasetKind: Send + Sync {
    fn name(&self) -> &'static str;

    fn num_classes(&self) -> usize {
        0
    }

    /// The generating mixture in raw coordinates, when there is one.
    fn mixture(&self) -> Option<MixtureSpec> {
        None
    }

    /// One raw sample and its label.
    fn draw(&self, rng: &mut SeededRng) -> (Vec<f64>, Option<usize>);
}

fn gaussian_draw(rng: &mut SeededRng, mean: &[f64], std: f64) -> Vec<f64> {
    mean.iter().map(|m| m + std * rng.sample::<f64, _>(StandardNormal)).collect()
}

struct Gmm2;

impl Gmm2 {
    fn means() -> Vec<Vec<f64>> {
        vec![vec![2.0, 0.0], vec![-2.0, 0.0]]
    }
}

impl DatasetKind for Gmm2 {
    fn name(&self) -> &'static str {
        "gmm2"
    }

    fn num_classes(&self) -> usize {
        2
    }

    fn mixture(&self) -> Option<MixtureSpec> {
        Some(MixtureSpec::new(Gmm2::means(), GMM2_STD, vec![0.5, 0.5]).expect("valid constants"))
    }

    fn draw(&self, rng: &mut SeededRng) -> (Vec<f64>, Option<usize>) {
        let label = rng.gen_range(0..2);
        (gaussian_draw(rng, &Gmm2::means()[label], GMM2_STD), Some(label))
    }
}

struct Gmm8;

impl Gmm8 {
    fn means() -> Vec<Vec<f64>> {
        (0..8)
            .map(|k| {
                let a = 2.0 * PI * k as f64 / 8.0;
                vec![GMM8_RADIUS * a.cos(), GMM8_RADIUS * a.sin()]
            })
            .collect()
    }
}

impl DatasetKind for Gmm8 {
    fn name(&self) -> &'static str {
        "gmm8"
    }

    fn num_classes(&self) -> usize {
        8
    }

    fn mixture(&self) -> Option<MixtureSpec> {
        Some(MixtureSpec::new(Gmm8::means(), GMM8_STD, vec![0.125; 8]).expect("valid constants"))
    }

    fn draw(&self, rng: &mut SeededRng) -> (Vec<f64>, Option<usize>) {
        let label = rng.gen_range(0..8);
        (gaussian_draw(rng, &Gmm8::means()[label], GMM8_STD), Some(label))
    }
}

struct SwissRoll;

impl DatasetKind for SwissRoll {
    fn name(&self) -> &'static str {
        "swissroll"
    }

    fn draw(&self, rng: &mut SeededRng) -> (Vec<f64>, Option<usize>) {
        let t = 1.5 * PI * (1.0 + 2.0 * rng.gen::<f64>());
        let scale = 4.0 / (4.5 * PI);
        let x = vec![t * t.cos() * scale, t * t.sin() * scale];
        (gaussian_draw(rng, &x, SWISSROLL_NOISE), None)
    }
}

struct Checkerboard;

impl DatasetKind for Checkerboard {
    fn name(&self) -> &'static str {
        "checkerboard"
    }

    fn draw(&self, rng: &mut SeededRng) -> (Vec<f64>, Option<usize>) {
        let x1: f64 = rng.gen::<f64>() * 4.0 - 2.0;
        let x2_: f64 = rng.gen::<f64>() - 2.0 * rng.gen_range(0..2) as f64;
        let x2 = x2_ + (x1.floor().rem_euclid(2.0));
        (vec![x1 * CHECKER_SCALE, x2 * CHECKER_SCALE], None)
    }
}

type KindCtor = fn() -> Box<dyn DatasetKind>;

static KINDS: Lazy<BTreeMap<&'static str, KindCtor>> = Lazy::new(|| {
    let mut map: BTreeMap<&'static str, KindCtor> = BTreeMap::new();
    map.insert("gmm2", || Box::new(Gmm2));
    map.insert("gmm8", || Box::new(Gmm8));
    map.insert("swissroll", || Box::new(SwissRoll));
    map.insert("checkerboard", || Box::new(Checkerboard));
    map
});

pub fn dataset_kinds() -> Vec<&'static str> {
    KINDS.keys().copied().collect()
}

pub fn dataset_kind(name: &str) -> Result<Box<dyn DatasetKind>> {
    KINDS.get(name).map(|c| c()).ok_or_else(|| Error::UnknownName {
        what: "dataset kind",
        name: name.to_string(),
        known: dataset_kinds().join(", "),
    })
}

/// Per-axis affine map `raw = standardized·scale + shift`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Affine {
    pub shift: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Affine {
    pub fn identity(dim: usize) -> Self {
        Affine {
            shift: vec![0.0; dim],
            scale: vec![1.0; dim],
        }
    }

    fn fit(raw: &[Vec<f64>]) -> Self {
        let dim = raw[0].len();
        let n = raw.len() as f64;
        let shift: Vec<f64> = (0..dim).map(|j| raw.iter().map(|r| r[j]).sum::<f64>() / n).collect();
        let scale = (0..dim)
            .map(|j| {
                let var = raw.iter().map(|r| (r[j] - shift[j]).powi(2)).sum::<f64>() / n;
                if var > 0.0 {
                    var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        Affine { shift, scale }
    }

    pub fn dim(&self) -> usize {
        self.shift.len()
    }

    pub fn to_raw_row(&self, z: &[f64]) -> Vec<f64> {
        z.iter().zip(&self.scale).zip(&self.shift).map(|((z, s), m)| z * s + m).collect()
    }

    pub fn to_raw(&self, z: &Array) -> Array {
        let mut out = z.clone();
        let c = z.cols();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v = *v * self.scale[i % c] + self.shift[i % c];
        }
        out
    }

    pub fn standardize(&self, raw: &Array) -> Array {
        let mut out = raw.clone();
        let c = raw.cols();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v = (*v - self.shift[i % c]) / self.scale[i % c];
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub kind: String,
    pub n: usize,
    pub seed: u64,
    pub standardization: Affine,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    samples: Array,
    labels: Option<Vec<usize>>,
    num_classes: usize,
    spec: DatasetSpec,
}

fn draw_raw(kind: &dyn DatasetKind, n: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<Option<usize>>) {
    let mut rng = seeded(seed);
    (0..n).map(|_| kind.draw(&mut rng)).unzip()
}

pub fn make_dataset(kind: &str, n: usize, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::Invalid("dataset needs at least one sample".into()));
    }
    let k = dataset_kind(kind)?;
    let (raw, labels) = draw_raw(k.as_ref(), n, seed);
    let affine = Affine::fit(&raw);
    let dim = raw[0].len();
    let samples = Array::matrix(n, dim, raw.iter().flat_map(|r| r.iter().copied()).collect())?;
    let samples = affine.standardize(&samples);
    let labels: Option<Vec<usize>> = labels.into_iter().collect();
    Ok(Dataset {
        samples,
        labels,
        num_classes: k.num_classes(),
        spec: DatasetSpec {
            kind: kind.to_string(),
            n,
            seed,
            standardization: affine,
        },
    })
}

impl Dataset {
    /// Standardized samples, `[n, dim]`.
    pub fn samples(&self) -> &Array {
        &self.samples
    }

    pub fn raw(&self) -> Array {
        self.spec.standardization.to_raw(&self.samples)
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn spec(&self) -> &DatasetSpec {
        &self.spec
    }

    pub fn affine(&self) -> &Affine {
        &self.spec.standardization
    }

    pub fn dim(&self) -> usize {
        self.samples.cols()
    }

    pub fn len(&self) -> usize {
        self.samples.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// The generating mixture in raw coordinates, if the kind has one.
    pub fn mixture(&self) -> Option<MixtureSpec> {
        dataset_kind(&self.spec.kind).ok().and_then(|k| k.mixture())
    }

    /// A fresh draw from the same kind, standardized with this dataset's map.
    pub fn held_out(&self, n: usize, seed: u64) -> Result<Dataset> {
        let k = dataset_kind(&self.spec.kind)?;
        if n == 0 {
            return Err(Error::Invalid("held-out set needs at least one sample".into()));
        }
        let (raw, labels) = draw_raw(k.as_ref(), n, seed);
        let samples = Array::matrix(n, self.dim(), raw.iter().flat_map(|r| r.iter().copied()).collect())?;
        Ok(Dataset {
            samples: self.spec.standardization.standardize(&samples),
            labels: labels.into_iter().collect(),
            num_classes: self.num_classes,
            spec: DatasetSpec {
                kind: self.spec.kind.clone(),
                n,
                seed,
                standardization: self.spec.standardization.clone(),
            },
        })
    }

    /// Writes the standardized samples (and labels) to `csv_path` and the
    /// generator spec to a `.json` sidecar next to it.
    pub fn export(&self, csv_path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(csv_path)?;
        let mut header: Vec<String> = (0..self.dim()).map(|j| format!("x{j}")).collect();
        if self.labels.is_some() {
            header.push("label".into());
        }
        w.write_record(&header)?;
        for i in 0..self.len() {
            let mut rec: Vec<String> = self.samples.row(i).iter().map(|v| format!("{v:?}")).collect();
            if let Some(l) = &self.labels {
                rec.push(l[i].to_string());
            }
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(csv_path, e))?;
        let sidecar = csv_path.with_extension("json");
        std::fs::write(&sidecar, serde_json::to_string_pretty(&self.spec)?).map_err(|e| Error::io(&sidecar, e))
    }

    pub fn import(csv_path: &Path) -> Result<Dataset> {
        let sidecar = csv_path.with_extension("json");
        let text = std::fs::read_to_string(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
        let spec: DatasetSpec = serde_json::from_str(&text)?;
        let kind = dataset_kind(&spec.kind)?;
        let mut r = csv::Reader::from_path(csv_path)?;
        let headers = r.headers()?.clone();
        let has_labels = headers.iter().last() == Some("label");
        let dim = headers.len() - usize::from(has_labels);
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            for j in 0..dim {
                data.push(rec[j].parse::<f64>().map_err(|e| Error::Invalid(format!("bad value `{}`: {e}", &rec[j])))?);
            }
            if has_labels {
                let l: usize = rec[dim].parse().map_err(|e| Error::Invalid(format!("bad label `{}`: {e}", &rec[dim])))?;
                if l >= kind.num_classes() {
                    return Err(Error::Invalid(format!("label {l} outside [0, {})", kind.num_classes())));
                }
                labels.push(l);
            }
        }
        let n = data.len() / dim.max(1);
        if n != spec.n {
            return Err(Error::Invalid(format!("sidecar says {} rows, csv has {n}", spec.n)));
        }
        Ok(Dataset {
            samples: Array::matrix(n, dim, data)?,
            labels: has_labels.then_some(labels),
            num_classes: kind.num_classes(),
            spec,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gmm8_means_lie_on_the_circle() {
        let m = Gmm8::means();
        assert_eq!(m[0], vec![4.0, 0.0]);
        assert!((m[1][0] - 2.828427).abs() < 1e-6 && (m[1][1] - 2.828427).abs() < 1e-6);
        for mean in &m {
            assert!(((mean[0].powi(2) + mean[1].powi(2)).sqrt() - 4.0).abs() < 1e-12);
        }
    }

    #[test]
    fn regeneration_is_bit_identical() {
        for kind in dataset_kinds() {
            let a = make_dataset(kind, 300, 5).unwrap();
            let b = make_dataset(kind, 300, 5).unwrap();
            assert_eq!(a, b, "{kind}");
        }
    }

    #[test]
    fn standardization_round_trip() {
        for kind in dataset_kinds() {
            let d = make_dataset(kind, 500, 9).unwrap();
            let (raw, _) = draw_raw(dataset_kind(kind).unwrap().as_ref(), 500, 9);
            let back = d.raw();
            for (i, r) in raw.iter().enumerate() {
                for (j, v) in r.iter().enumerate() {
                    assert!((back.row(i)[j] - v).abs() < 1e-12, "{kind}");
                }
            }
            for j in 0..d.dim() {
                let col: Vec<f64> = (0..d.len()).map(|i| d.samples().row(i)[j]).collect();
                let mean = col.iter().sum::<f64>() / col.len() as f64;
                let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / col.len() as f64;
                assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-9, "{kind}");
            }
        }
    }

    #[test]
    fn unlabeled_kinds_and_scales() {
        for kind in ["swissroll", "checkerboard"] {
            let d = make_dataset(kind, 2000, 1).unwrap();
            assert!(d.labels().is_none());
            let raw = d.raw();
            let max_norm = (0..raw.rows()).map(|i| raw.row(i).iter().map(|v| v * v).sum::<f64>().sqrt()).fold(0.0, f64::max);
            assert!(max_norm < 4.5, "{kind}: {max_norm}");
        }
    }

    #[test]
    fn rejects_unknown_kind_and_empty() {
        assert!(matches!(make_dataset("moons", 10, 0), Err(Error::UnknownName { .. })));
        assert!(make_dataset("gmm2", 0, 0).is_err());
    }

    #[test]
    fn csv_export_import() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gmm2.csv");
        let d = make_dataset("gmm2", 50, 3).unwrap();
        d.export(&path).unwrap();
        let back = Dataset::import(&path).unwrap();
        assert_eq!(back, d);
        let s = make_dataset("swissroll", 20, 3).unwrap();
        let path = dir.path().join("roll.csv");
        s.export(&path).unwrap();
        assert_eq!(Dataset::import(&path).unwrap(), s);
    }
}
