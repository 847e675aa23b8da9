//! Generalized Pareto margins for threshold exceedances.

use nalgebra::Matrix2;
use serde::{Deserialize, Serialize};

use crate::data::DataMatrix;
use crate::error::{Error, Result};
use crate::optim::{nelder_mead, Feasible, NelderMeadOptions};

pub const MIN_EXCEEDANCES: usize = 10;
const SHAPE_LOWER: f64 = -0.5;
const SHAPE_UPPER: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GpdFit {
    pub threshold: f64,
    pub scale: f64,
    pub shape: f64,
    pub se_scale: f64,
    pub se_shape: f64,
    pub n_exceed: usize,
}

/// Sample quantile with linear interpolation between order statistics
/// (the "type 7" definition).
pub fn quantile(values: &[f64], level: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let h = (v.len() - 1) as f64 * level;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(v.len() - 1);
    v[lo] + (h - lo as f64) * (v[hi] - v[lo])
}

/// Fits a GPD to the excesses of `column` above its `quantile_level`
/// empirical quantile by maximum likelihood.
pub fn fit_gpd(data: &DataMatrix, column: &str, quantile_level: f64) -> Result<GpdFit> {
    if !(quantile_level > 0.0 && quantile_level < 1.0) {
        return Err(Error::invalid(format!("quantile level {quantile_level} not in (0, 1)")));
    }
    let j = data.column_index(column)?;
    let values = data.column(j);
    let u = quantile(&values, quantile_level);
    fit_gpd_above(&values, u)
}

/// Maximum likelihood GPD fit to `values − u` over `values > u`.
pub fn fit_gpd_above(values: &[f64], u: f64) -> Result<GpdFit> {
    let excess: Vec<f64> = values.iter().filter(|&&x| x > u).map(|&x| x - u).collect();
    if excess.len() < MIN_EXCEEDANCES {
        return Err(Error::TooFewExceedances {
            found: excess.len(),
            required: MIN_EXCEEDANCES,
        });
    }
    let mean = excess.iter().sum::<f64>() / excess.len() as f64;
    let nll = |p: &[f64]| neg_log_lik(&excess, p[0].exp(), p[1]);
    let ls = mean.ln();
    let feasible = Feasible::boxed(vec![ls - 15.0, SHAPE_LOWER], vec![ls + 15.0, SHAPE_UPPER]);
    let opts = NelderMeadOptions {
        x_tol: 1e-10,
        f_tol: 1e-14,
        max_evals: 4000,
        initial_step: 0.05,
    };
    let best = [-0.2, 0.1, 0.5]
        .iter()
        .map(|&g| {
            // moment-type start for the scale
            let s0 = (mean * (1.0 - g)).max(1e-12 * mean);
            nelder_mead(&nll, &[s0.ln(), g], &feasible, &[1.0, SHAPE_UPPER - SHAPE_LOWER], opts)
        })
        .min_by(|a, b| a.f.total_cmp(&b.f))
        .expect("three starts");
    if !best.f.is_finite() || !best.converged {
        return Err(Error::NonConvergence("GPD likelihood maximization".into()));
    }
    let (scale, shape) = (best.x[0].exp(), best.x[1]);
    let info = hessian(|s, g| neg_log_lik(&excess, s, g), scale, shape);
    let cov = info
        .try_inverse()
        .filter(|c| c[(0, 0)] > 0.0 && c[(1, 1)] > 0.0)
        .ok_or_else(|| Error::Singular("observed information of the GPD fit".into()))?;
    Ok(GpdFit {
        threshold: u,
        scale,
        shape,
        se_scale: cov[(0, 0)].sqrt(),
        se_shape: cov[(1, 1)].sqrt(),
        n_exceed: excess.len(),
    })
}

fn neg_log_lik(excess: &[f64], sigma: f64, gamma: f64) -> f64 {
    if sigma <= 0.0 {
        return f64::INFINITY;
    }
    let n = excess.len() as f64;
    if gamma.abs() < 1e-9 {
        return n * sigma.ln() + excess.iter().sum::<f64>() / sigma;
    }
    let mut s = 0.0;
    for &y in excess {
        let t = 1.0 + gamma * y / sigma;
        if t <= 0.0 {
            return f64::INFINITY;
        }
        s += t.ln();
    }
    n * sigma.ln() + (1.0 + 1.0 / gamma) * s
}

/// Central-difference Hessian in `(σ, γ)`.
fn hessian(f: impl Fn(f64, f64) -> f64, s: f64, g: f64) -> Matrix2<f64> {
    let hs = 1e-4 * s;
    let hg = 1e-4;
    let f0 = f(s, g);
    let dss = (f(s + hs, g) - 2.0 * f0 + f(s - hs, g)) / (hs * hs);
    let dgg = (f(s, g + hg) - 2.0 * f0 + f(s, g - hg)) / (hg * hg);
    let dsg = (f(s + hs, g + hg) - f(s + hs, g - hg) - f(s - hs, g + hg) + f(s - hs, g - hg)) / (4.0 * hs * hg);
    Matrix2::new(dss, dsg, dsg, dgg)
}

/// `P[X > x | X > u] = (1 + γ(x − u)/σ)^{−1/γ}`, with the exponential limit
/// for `|γ| < 1e−9`.
pub fn gpd_survival(x: f64, fit: &GpdFit) -> Result<f64> {
    if x < fit.threshold {
        return Err(Error::OutOfDomain(format!(
            "{x} is below the threshold {}",
            fit.threshold
        )));
    }
    let y = x - fit.threshold;
    if fit.shape.abs() < 1e-9 {
        return Ok((-y / fit.scale).exp());
    }
    let t = 1.0 + fit.shape * y / fit.scale;
    if t <= 0.0 {
        return Ok(0.0);
    }
    Ok(t.powf(-1.0 / fit.shape).clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn gpd_sample(sigma: f64, gamma: f64, n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let u: f64 = rng.random();
                if gamma.abs() < 1e-12 {
                    -sigma * u.ln()
                } else {
                    sigma * (u.powf(-gamma) - 1.0) / gamma
                }
            })
            .collect()
    }

    fn fit(sigma: f64, gamma: f64) -> GpdFit {
        GpdFit {
            threshold: 0.0,
            scale: sigma,
            shape: gamma,
            se_scale: 0.0,
            se_shape: 0.0,
            n_exceed: 1,
        }
    }

    #[test]
    fn survival_values() {
        let f = fit(1.0, 0.0);
        assert_eq!(gpd_survival(0.0, &f).unwrap(), 1.0);
        assert!((gpd_survival(1.0, &f).unwrap() - (-1f64).exp()).abs() < 1e-15);
        assert!((gpd_survival(2.0, &fit(1.0, 0.5)).unwrap() - 0.25).abs() < 1e-15);
        assert!(gpd_survival(-0.1, &f).is_err());
        let g = fit(1.3, -0.2);
        let mut prev = 1.0;
        for i in 0..200 {
            let s = gpd_survival(i as f64 * 0.05, &g).unwrap();
            assert!(s <= prev);
            prev = s;
        }
    }

    #[test]
    fn recovers_parameters_from_large_sample() {
        let x = gpd_sample(1.12, 0.03, 100_000, 1);
        let f = fit_gpd_above(&x, 0.0).unwrap();
        assert!((f.scale - 1.12).abs() < 0.02, "{f:?}");
        assert!((f.shape - 0.03).abs() < 0.02, "{f:?}");
        assert_eq!(f.n_exceed, 100_000);
    }

    #[test]
    fn error_shrinks_with_sample_size() {
        let err = |n: usize| {
            (0..5)
                .map(|s| {
                    let f = fit_gpd_above(&gpd_sample(1.0, 0.2, n, 10 + s), 0.0).unwrap();
                    (f.scale - 1.0).abs() + (f.shape - 0.2).abs()
                })
                .sum::<f64>()
        };
        assert!(err(100_000) < err(1_000));
    }

    #[test]
    fn exponential_data_gives_small_shape() {
        let f = fit_gpd_above(&gpd_sample(2.0, 0.0, 50_000, 3), 0.0).unwrap();
        assert!(f.shape.abs() < 0.02);
        assert!(f.se_shape > 0.0 && f.se_shape < 0.02);
    }

    #[test]
    fn too_few_exceedances() {
        let x: Vec<f64> = (0..100).map(f64::from).collect();
        assert!(matches!(
            fit_gpd_above(&x, 95.0),
            Err(Error::TooFewExceedances { found: 4, required: 10 })
        ));
    }

    #[test]
    fn type7_quantile() {
        assert_eq!(quantile(&[4.0, 1.0, 3.0, 2.0], 0.5), 2.5);
        assert_eq!(quantile(&[1.0, 2.0, 3.0], 1.0), 3.0);
    }
}
