//! Unbiased RBF maximum mean discrepancy between embedding sets.
//!
//! Used to size the feature-level shift between source and target domains.
//! The unbiased estimator drops diagonal terms, so it can go slightly
//! negative when the sets coincide.

use crate::error::{Error, Result};

/// Kernel bandwidth selection for [`rbf_mmd2`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Bandwidth {
    /// Median of pairwise squared distances over the pooled set; falls back
    /// to 1.0 when every pairwise distance is zero.
    Median,
    /// Fixed sigma^2 for the exponent denominator 2*sigma^2.
    Fixed(f64),
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = x - y;
            d * d
        })
        .sum()
}

fn median_sq_distance(x: &[Vec<f64>], y: &[Vec<f64>]) -> f64 {
    let pooled: Vec<&Vec<f64>> = x.iter().chain(y.iter()).collect();
    let mut dists = Vec::with_capacity(pooled.len() * (pooled.len() - 1) / 2);
    for i in 0..pooled.len() {
        for j in (i + 1)..pooled.len() {
            dists.push(sq_dist(pooled[i], pooled[j]));
        }
    }
    dists.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
    let median = if dists.len() % 2 == 1 {
        dists[dists.len() / 2]
    } else {
        0.5 * (dists[dists.len() / 2 - 1] + dists[dists.len() / 2])
    };
    if median > 0.0 {
        median
    } else {
        1.0
    }
}

/// Unbiased squared MMD with an RBF kernel exp(-||a-b||^2 / (2 sigma^2)).
///
/// Needs at least 2 points per side and equal dimensions throughout.
pub fn rbf_mmd2(x: &[Vec<f64>], y: &[Vec<f64>], bandwidth: Bandwidth) -> Result<f64> {
    if x.len() < 2 || y.len() < 2 {
        return Err(Error::parameter(format!(
            "mmd needs >= 2 points per set, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    let dim = x[0].len();
    if dim == 0 {
        return Err(Error::shape("mmd points must be non-empty".to_string()));
    }
    for v in x.iter().chain(y.iter()) {
        if v.len() != dim {
            return Err(Error::shape(format!(
                "mmd dimension mismatch: expected {dim}, got {}",
                v.len()
            )));
        }
        if v.iter().any(|e| !e.is_finite()) {
            return Err(Error::numeric("mmd input contains non-finite value"));
        }
    }
    let sigma2 = match bandwidth {
        Bandwidth::Median => median_sq_distance(x, y),
        Bandwidth::Fixed(s2) => {
            if !(s2.is_finite() && s2 > 0.0) {
                return Err(Error::parameter(format!("mmd bandwidth must be positive, got {s2}")));
            }
            s2
        }
    };
    let k = |a: &[f64], b: &[f64]| (-sq_dist(a, b) / (2.0 * sigma2)).exp();

    let m = x.len() as f64;
    let n = y.len() as f64;
    let mut kxx = 0.0;
    for i in 0..x.len() {
        for j in 0..x.len() {
            if i != j {
                kxx += k(&x[i], &x[j]);
            }
        }
    }
    let mut kyy = 0.0;
    for i in 0..y.len() {
        for j in 0..y.len() {
            if i != j {
                kyy += k(&y[i], &y[j]);
            }
        }
    }
    let mut kxy = 0.0;
    for xi in x {
        for yj in y {
            kxy += k(xi, yj);
        }
    }
    Ok(kxx / (m * (m - 1.0)) + kyy / (n * (n - 1.0)) - 2.0 * kxy / (m * n))
}
