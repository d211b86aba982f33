//! Sample-set metrics and small statistics helpers.

use gradkit::Array;

use crate::error::{Error, Result};
use crate::rewards::MixtureSpec;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Bandwidth {
    /// Median pairwise distance over the union of both sets.
    Median,
    Fixed(f64),
}

fn sorted_rows(x: &Array) -> Vec<&[f64]> {
    let mut rows: Vec<&[f64]> = (0..x.rows()).map(|i| x.row(i)).collect();
    rows.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    rows
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Unbiased MMD² with the RBF kernel `exp(−‖x−y‖²/(2h²))`.
///
/// Rows are put in a canonical order first, so the value does not depend
/// on how either set is permuted.
pub fn mmd2(a: &Array, b: &Array, bandwidth: Bandwidth) -> Result<f64> {
    if a.rows() < 2 || b.rows() < 2 {
        return Err(Error::Invalid("MMD needs at least two samples per set".into()));
    }
    if a.cols() != b.cols() {
        return Err(Error::Invalid(format!("MMD dimension mismatch: {} vs {}", a.cols(), b.cols())));
    }
    let (ra, rb) = (sorted_rows(a), sorted_rows(b));
    let h2 = match bandwidth {
        Bandwidth::Fixed(h) if h > 0.0 => h * h,
        Bandwidth::Fixed(h) => return Err(Error::Config(format!("MMD bandwidth must be positive, got {h}"))),
        Bandwidth::Median => {
            let all: Vec<&[f64]> = ra.iter().chain(&rb).copied().collect();
            let mut d: Vec<f64> = Vec::with_capacity(all.len() * (all.len() - 1) / 2);
            for i in 0..all.len() {
                for j in i + 1..all.len() {
                    d.push(sq_dist(all[i], all[j]));
                }
            }
            let mid = d.len() / 2;
            let (_, m, _) = d.select_nth_unstable_by(mid, |x, y| x.total_cmp(y));
            if *m > 0.0 {
                *m
            } else {
                1.0
            }
        }
    };
    let k = |x: &[f64], y: &[f64]| (-sq_dist(x, y) / (2.0 * h2)).exp();
    let within = |r: &[&[f64]]| {
        let mut s = 0.0;
        for i in 0..r.len() {
            for j in i + 1..r.len() {
                s += k(r[i], r[j]);
            }
        }
        2.0 * s / (r.len() * (r.len() - 1)) as f64
    };
    let mut cross = 0.0;
    for x in &ra {
        for y in &rb {
            cross += k(x, y);
        }
    }
    Ok(within(&ra) + within(&rb) - 2.0 * cross / (ra.len() * rb.len()) as f64)
}

/// Share of samples inside each mode's ball, plus the share in none.
#[derive(Clone, Debug, PartialEq)]
pub struct ModeFractions {
    pub fractions: Vec<f64>,
    pub outside: f64,
}

/// Assigns raw-coordinate samples to balls of `radius·std` around each
/// mixture mean. The balls must not overlap.
pub fn mode_fractions(samples: &Array, mixture: &MixtureSpec, radius: f64) -> Result<ModeFractions> {
    if !(radius > 0.0) {
        return Err(Error::Config(format!("mode radius must be positive, got {radius}")));
    }
    if samples.cols() != mixture.dim() {
        return Err(Error::Invalid(format!("samples have {} columns, mixture {}", samples.cols(), mixture.dim())));
    }
    let r = radius * mixture.std();
    let means = mixture.means();
    for i in 0..means.len() {
        for j in i + 1..means.len() {
            if sq_dist(&means[i], &means[j]).sqrt() <= 2.0 * r {
                return Err(Error::Config(format!("mode balls {i} and {j} overlap at radius {radius} std")));
            }
        }
    }
    let mut counts = vec![0usize; means.len()];
    for i in 0..samples.rows() {
        if let Some(k) = means.iter().position(|m| sq_dist(samples.row(i), m) <= r * r) {
            counts[k] += 1;
        }
    }
    let n = samples.rows() as f64;
    let fractions: Vec<f64> = counts.iter().map(|&c| c as f64 / n).collect();
    let inside: usize = counts.iter().sum();
    Ok(ModeFractions {
        fractions,
        outside: (samples.rows() - inside) as f64 / n,
    })
}

pub fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Sample standard deviation (`n − 1` denominator); 0 for fewer than two values.
pub fn std_dev(x: &[f64]) -> f64 {
    if x.len() < 2 {
        return 0.0;
    }
    let m = mean(x);
    (x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (x.len() - 1) as f64).sqrt()
}

pub fn std_err(x: &[f64]) -> f64 {
    std_dev(x) / (x.len() as f64).sqrt()
}

/// One-sided 95% normal quantile.
pub const Z95: f64 = 1.644_853_626_951_472_2;

/// Lower one-sided 95% confidence bound on `mean(a) − mean(b)` with
/// unequal variances (normal approximation, suited to large samples).
pub fn welch_lower_bound(a: &[f64], b: &[f64]) -> f64 {
    let se = (std_dev(a).powi(2) / a.len() as f64 + std_dev(b).powi(2) / b.len() as f64).sqrt();
    mean(a) - mean(b) - Z95 * se
}

/// Mean of the first and last tenth of a series (at least one element each).
pub fn decile_means(x: &[f64]) -> Option<(f64, f64)> {
    if x.is_empty() {
        return None;
    }
    let w = (x.len() / 10).max(1);
    Some((mean(&x[..w]), mean(&x[x.len() - w..])))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{randn, seeded};

    #[test]
    fn mmd_separates_and_is_permutation_free() {
        let a = randn(&mut seeded(0), 400, 2);
        let mut b = randn(&mut seeded(1), 400, 2);
        let same = mmd2(&a, &b, Bandwidth::Median).unwrap();
        assert!(same.abs() < 0.01, "{same}");
        let perm: Vec<usize> = (0..400).rev().collect();
        let a2 = a.select_rows(&perm).unwrap();
        assert_eq!(mmd2(&a2, &b, Bandwidth::Median).unwrap(), same);
        for i in 0..b.rows() {
            b.row_mut(i)[0] += 10.0;
        }
        assert!(mmd2(&a, &b, Bandwidth::Median).unwrap() > 0.5);
        assert!(mmd2(&a, &randn(&mut seeded(2), 5, 3), Bandwidth::Median).is_err());
    }

    #[test]
    fn mode_fraction_partition() {
        let mix = MixtureSpec::new(vec![vec![2.0, 0.0], vec![-2.0, 0.0]], 0.2, vec![0.5, 0.5]).unwrap();
        let x = Array::matrix(4, 2, vec![2.0, 0.0, 2.1, 0.0, -2.0, 0.3, 0.0, 0.0]).unwrap();
        let f = mode_fractions(&x, &mix, 3.0).unwrap();
        assert_eq!(f.fractions, vec![0.5, 0.25]);
        assert_eq!(f.outside, 0.25);
        assert!(mode_fractions(&x, &mix, 12.0).is_err());
    }

    #[test]
    fn statistics() {
        assert_eq!(decile_means(&[1.0, 2.0, 3.0]), Some((1.0, 3.0)));
        assert!((std_dev(&[1.0, 3.0]) - 2f64.sqrt()).abs() < 1e-15);
        assert!(welch_lower_bound(&[1.0; 10], &[0.0; 10]) == 1.0);
    }
}
