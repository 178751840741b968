//! Dirichlet sampling for barycentric weights.
//!
//! The symmetric alpha = 1 case (the one the attack uses) goes through the
//! exponential-spacings construction so the draw count per sample is fixed.
//! General alphas fall back to Marsaglia-Tsang gamma variates.

use crate::error::{Error, Result};
use crate::rng::RngState;

/// One draw from Dirichlet(alpha); the result sums to 1 exactly up to
/// floating rounding and every component is strictly positive.
pub fn dirichlet_sample(alpha: &[f64], rng: &mut RngState) -> Result<Vec<f64>> {
    if alpha.len() < 2 {
        return Err(Error::parameter(format!(
            "dirichlet needs at least 2 components, got {}",
            alpha.len()
        )));
    }
    if alpha.iter().any(|&a| !(a.is_finite() && a > 0.0)) {
        return Err(Error::parameter(
            "dirichlet concentration must be finite and positive".to_string(),
        ));
    }
    let mut g: Vec<f64> = Vec::with_capacity(alpha.len());
    for &a in alpha {
        let v = if a == 1.0 {
            // Exp(1) via inverse CDF; open01 keeps the log argument nonzero.
            -rng.open01().ln()
        } else {
            gamma_sample(a, rng)
        };
        g.push(v);
    }
    let total: f64 = g.iter().sum();
    if !(total.is_finite() && total > 0.0) {
        return Err(Error::numeric("dirichlet normalizer degenerate"));
    }
    for v in &mut g {
        *v /= total;
        // Renormalized exponentials can round to subnormal zero; nudge so
        // downstream log-weights stay finite.
        if *v <= 0.0 {
            *v = f64::MIN_POSITIVE;
        }
    }
    Ok(g)
}

/// Marsaglia-Tsang squeeze method for Gamma(shape, 1).
fn gamma_sample(shape: f64, rng: &mut RngState) -> f64 {
    if shape < 1.0 {
        // Boost: Gamma(a) = Gamma(a+1) * U^(1/a).
        let g = gamma_sample(shape + 1.0, rng);
        let u = rng.open01();
        return g * u.powf(1.0 / shape);
    }
    let d = shape - 1.0 / 3.0;
    let c = 1.0 / (9.0 * d).sqrt();
    loop {
        let x = rng.normal();
        let v = 1.0 + c * x;
        if v <= 0.0 {
            continue;
        }
        let v3 = v * v * v;
        let u = rng.open01();
        let x2 = x * x;
        if u < 1.0 - 0.0331 * x2 * x2 {
            return d * v3;
        }
        if u.ln() < 0.5 * x2 + d * (1.0 - v3 + v3.ln()) {
            return d * v3;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sums_to_one_and_positive() {
        let mut rng = RngState::new(42);
        let alpha = vec![1.0; 4];
        for _ in 0..1000 {
            let w = dirichlet_sample(&alpha, &mut rng).unwrap();
            let sum: f64 = w.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12, "sum={sum}");
            assert!(w.iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn symmetric_mean_is_uniform() {
        let mut rng = RngState::new(7);
        let alpha = vec![1.0; 4];
        let n = 100_000;
        let mut mean = vec![0.0; 4];
        for _ in 0..n {
            let w = dirichlet_sample(&alpha, &mut rng).unwrap();
            for (m, v) in mean.iter_mut().zip(&w) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= n as f64;
        }
        for m in &mean {
            assert!((m - 0.25).abs() < 0.01, "mean component {m}");
        }
    }

    #[test]
    fn symmetric_alpha1_variance_matches_theory() {
        // Var = a(1-a)/(K+1) with a = 1/K; for K=4 that is 3/80 = 0.0375.
        let mut rng = RngState::new(11);
        let alpha = vec![1.0; 4];
        let n = 100_000;
        let mut sq = 0.0;
        for _ in 0..n {
            let w = dirichlet_sample(&alpha, &mut rng).unwrap();
            sq += (w[0] - 0.25) * (w[0] - 0.25);
        }
        let var = sq / n as f64;
        assert!((var - 0.0375).abs() < 0.002, "var={var}");
    }

    #[test]
    fn asymmetric_mean_matches_theory() {
        // E[w_i] = alpha_i / sum(alpha).
        let mut rng = RngState::new(3);
        let alpha = vec![2.0, 0.5, 1.5];
        let total: f64 = alpha.iter().sum();
        let n = 100_000;
        let mut mean = vec![0.0; 3];
        for _ in 0..n {
            let w = dirichlet_sample(&alpha, &mut rng).unwrap();
            for (m, v) in mean.iter_mut().zip(&w) {
                *m += v;
            }
        }
        for (m, a) in mean.iter_mut().zip(&alpha) {
            *m /= n as f64;
            let expect = a / total;
            assert!((*m - expect).abs() < 0.01, "mean {m} expect {expect}");
        }
    }

    #[test]
    fn invalid_parameters_rejected() {
        let mut rng = RngState::new(1);
        assert!(dirichlet_sample(&[1.0], &mut rng).is_err());
        assert!(dirichlet_sample(&[1.0, 0.0], &mut rng).is_err());
        assert!(dirichlet_sample(&[1.0, -2.0], &mut rng).is_err());
        assert!(dirichlet_sample(&[1.0, f64::NAN], &mut rng).is_err());
    }

    #[test]
    fn deterministic_for_fixed_seed() {
        let alpha = vec![1.0; 4];
        let mut a = RngState::new(99);
        let mut b = RngState::new(99);
        for _ in 0..100 {
            assert_eq!(
                dirichlet_sample(&alpha, &mut a).unwrap(),
                dirichlet_sample(&alpha, &mut b).unwrap()
            );
        }
    }
}
