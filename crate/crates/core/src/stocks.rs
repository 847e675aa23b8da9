//! Bivariate analysis of two return series: GPD margins, max-linear fits
//! with factor and Marshall–Olkin tests, tail dependence coefficient paths,
//! level sets of ℓ and joint exceedance probabilities.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::{ranks, DataMatrix, RankMatrix};
use crate::empirical::{bootstrap_chi_path, estimate_on_grid, stdf_at, EstimatorKind};
use crate::error::{Error, Result};
use crate::gpd::{fit_gpd, gpd_survival, GpdFit};
use crate::models::ModelSpec;
use crate::sim::grid_recipe;
use crate::testing::{run_test, StatisticKind, TestResult, TestSpec};
use crate::wls::{FitOptions, FitResult, WlsProblem};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StocksConfig {
    pub k: usize,
    pub estimator: EstimatorKind,
    /// Threshold quantile of the GPD margins.
    pub quantile_level: f64,
    /// Factor count of the larger model; its last column is tested.
    pub factors: usize,
    pub chi_ks: Vec<usize>,
    pub bootstrap: usize,
    pub levels: Vec<f64>,
    /// Points on each level set.
    pub level_points: usize,
    pub exceedance_x: Vec<f64>,
    pub n_draws: usize,
    pub starts: usize,
    pub seed: u64,
}

impl Default for StocksConfig {
    fn default() -> Self {
        Self {
            k: 40,
            estimator: EstimatorKind::Empirical,
            quantile_level: 0.95,
            factors: 4,
            chi_ks: (0..=34).map(|i| 200 - 5 * i).collect(),
            bootstrap: 1000,
            levels: vec![0.2, 0.4, 0.8, 1.0],
            level_points: 101,
            exceedance_x: (0..=19).map(|i| 2.5 + 0.5 * i as f64).collect(),
            n_draws: crate::limit::DEFAULT_DRAWS,
            starts: 20,
            seed: 0,
        }
    }
}

/// A fitted bivariate max-linear model with `B` laid out row by row.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FactorFit {
    pub factors: usize,
    pub b: Vec<Vec<f64>>,
    /// Standard errors in the layout of `b`; the dropped column has none.
    pub se: Option<Vec<Vec<Option<f64>>>>,
    /// Model-based `2 − ℓ(1, 1)`.
    pub chi: f64,
    pub fit: FitResult,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChiPoint {
    pub k: usize,
    pub empirical: f64,
    pub lower: f64,
    pub upper: f64,
    pub model: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LevelSetPoint {
    pub c: f64,
    pub source: String,
    pub x1: f64,
    pub x2: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExceedancePoint {
    pub x: f64,
    /// `None` below either threshold.
    pub model: Option<f64>,
    pub empirical: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StocksReport {
    pub n: usize,
    pub labels: Vec<String>,
    pub margins: Vec<GpdFit>,
    pub chi_hat: f64,
    pub full: FactorFit,
    /// Test that the last factor of the full model vanishes.
    pub factor_test: TestResult,
    pub reduced: FactorFit,
    /// Test of the Marshall–Olkin structure on the reduced model.
    pub marshall_olkin_test: TestResult,
    pub chi_path: Vec<ChiPoint>,
    pub level_sets: Vec<LevelSetPoint>,
    pub exceedance: Vec<ExceedancePoint>,
}

/// Bivariate max-linear model with `r` factors whose first column holds the
/// row-sum remainder, so θ lists columns 2..r.
pub fn bivariate_maxlinear(r: usize) -> Result<ModelSpec> {
    ModelSpec::max_linear(2, r)?.with_dropped_column(0)
}

/// `ℓ(x) = Σ_t max_j b_jt x_j` for an arbitrary nonnegative `B`.
pub fn maxlinear_stdf(b: &DMatrix<f64>, x: &[f64]) -> f64 {
    (0..b.ncols())
        .map(|t| (0..b.nrows()).map(|j| b[(j, t)] * x[j]).fold(0.0, f64::max))
        .sum()
}

/// `x1 + x2 − 1 + exp(−ℓ(x1, x2))`, the joint survival probability implied
/// by tail probabilities `x1`, `x2`.
pub fn joint_exceedance(l: impl Fn(&[f64]) -> f64, x1: f64, x2: f64) -> f64 {
    x1 + x2 - 1.0 + (-l(&[x1, x2])).exp()
}

/// Points of `{x : ℓ(x) = c}` using homogeneity along rays `(w, 1 − w)`.
pub fn level_set(l: impl Fn(&[f64]) -> f64, c: f64, points: usize) -> Vec<[f64; 2]> {
    (0..points)
        .filter_map(|i| {
            let w = i as f64 / (points - 1).max(1) as f64;
            let v = l(&[w, 1.0 - w]);
            (v > 0.0).then(|| [c * w / v, c * (1.0 - w) / v])
        })
        .collect()
}

fn fit_factors(
    data_ranks: &RankMatrix,
    n: usize,
    r: usize,
    k: usize,
    cfg: &StocksConfig,
) -> Result<(WlsProblem, FactorFit)> {
    let model = bivariate_maxlinear(r)?;
    let grid = grid_recipe(&model)?;
    let lhat = estimate_on_grid(data_ranks, k, &grid, cfg.estimator)?;
    let problem = WlsProblem::new(model, grid, lhat, n)?;
    let fit = problem.fit(&FitOptions {
        starts: cfg.starts,
        seed: cfg.seed,
        ..FitOptions::default()
    })?;
    let factor = describe(&problem.model, fit)?;
    Ok((problem, factor))
}

fn describe(model: &ModelSpec, fit: FitResult) -> Result<FactorFit> {
    let b = model.b_matrix(&fit.theta_hat)?;
    let rows: Vec<Vec<f64>> = (0..2).map(|j| b.row(j).iter().cloned().collect()).collect();
    let se = fit.std_errors.as_ref().map(|se| {
        (0..2)
            .map(|j| {
                (0..model.r())
                    .map(|t| model.maxlinear_index(j, t).map(|i| se[i]))
                    .collect()
            })
            .collect()
    });
    Ok(FactorFit {
        factors: model.r(),
        chi: 2.0 - maxlinear_stdf(&b, &[1.0, 1.0]),
        b: rows,
        se,
        fit,
    })
}

fn test_null(problem: &WlsProblem, coords: [(usize, usize); 2], cfg: &StocksConfig) -> Result<TestResult> {
    let tested = coords
        .iter()
        .map(|&(j, t)| {
            problem
                .model
                .maxlinear_index(j, t)
                .ok_or_else(|| Error::invalid(format!("b{}{} is not a free parameter", j + 1, t + 1)))
        })
        .collect::<Result<Vec<_>>>()?;
    let spec = TestSpec {
        n_draws: cfg.n_draws,
        seed: cfg.seed,
        ..TestSpec::new(tested, vec![0.0, 0.0], StatisticKind::Wald)?
    };
    run_test(
        problem,
        &spec,
        &FitOptions {
            starts: cfg.starts,
            seed: cfg.seed,
            ..FitOptions::default()
        },
    )
}

/// Runs the full analysis on a two-column matrix of returns.
pub fn analyze(data: &DataMatrix, cfg: &StocksConfig) -> Result<StocksReport> {
    if data.d() != 2 {
        return Err(Error::DimensionMismatch {
            expected: 2,
            got: data.d(),
        });
    }
    if cfg.factors < 3 {
        return Err(Error::invalid("the factor test needs at least three factors"));
    }
    let n = data.n();
    if cfg.k == 0 || cfg.k >= n {
        return Err(Error::invalid(format!("k = {} must lie in 1..{n}", cfg.k)));
    }
    let labels = data.labels().to_vec();
    let margins = labels
        .iter()
        .map(|l| fit_gpd(data, l, cfg.quantile_level))
        .collect::<Result<Vec<_>>>()?;
    let rk = ranks(data);
    let chi_hat = 2.0 - stdf_at(&rk, cfg.k, &[1.0, 1.0], cfg.estimator)?;

    let r = cfg.factors;
    let (full_problem, full) = fit_factors(&rk, n, r, cfg.k, cfg)?;
    let factor_test = test_null(&full_problem, [(0, r - 1), (1, r - 1)], cfg)?;
    // Marshall–Olkin: one common factor plus one factor per series
    let (reduced_problem, reduced) = fit_factors(&rk, n, 3, cfg.k, cfg)?;
    let marshall_olkin_test = test_null(&reduced_problem, [(0, 1), (1, 2)], cfg)?;

    let ks: Vec<usize> = cfg.chi_ks.iter().cloned().filter(|&k| k > 0 && k < n).collect();
    let bands = bootstrap_chi_path(data, &ks, cfg.estimator, cfg.bootstrap, 0.95, cfg.seed)?;
    let chi_path = bands
        .into_iter()
        .map(|band| {
            let (_, f) = fit_factors(&rk, n, r, band.k, cfg)?;
            Ok(ChiPoint {
                k: band.k,
                empirical: band.chi,
                lower: band.lower,
                upper: band.upper,
                model: f.chi,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let b_full = DMatrix::from_fn(2, r, |j, t| full.b[j][t]);
    let mut level_sets = Vec::new();
    for &c in &cfg.levels {
        let emp = |x: &[f64]| stdf_at(&rk, cfg.k, x, cfg.estimator).unwrap_or(f64::NAN);
        for (source, pts) in [
            ("empirical", level_set(emp, c, cfg.level_points)),
            ("model", level_set(|x| maxlinear_stdf(&b_full, x), c, cfg.level_points)),
        ] {
            level_sets.extend(pts.into_iter().map(|[x1, x2]| LevelSetPoint {
                c,
                source: source.to_string(),
                x1,
                x2,
            }));
        }
    }

    let tail = 1.0 - cfg.quantile_level;
    let exceedance = cfg
        .exceedance_x
        .iter()
        .map(|&x| {
            let both = (0..n).filter(|&i| data.get(i, 0) > x && data.get(i, 1) > x).count();
            let model = if x >= margins[0].threshold && x >= margins[1].threshold {
                let x1 = tail * gpd_survival(x, &margins[0])?;
                let x2 = tail * gpd_survival(x, &margins[1])?;
                Some(joint_exceedance(|p| maxlinear_stdf(&b_full, p), x1, x2))
            } else {
                None
            };
            Ok(ExceedancePoint {
                x,
                model,
                empirical: both as f64 / n as f64,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(StocksReport {
        n,
        labels,
        margins,
        chi_hat,
        full,
        factor_test,
        reduced,
        marshall_olkin_test,
        chi_path,
        level_sets,
        exceedance,
    })
}

impl StocksReport {
    pub fn write_chi_csv(&self, out: impl std::io::Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["k", "empirical", "lower", "upper", "model"])?;
        for p in &self.chi_path {
            w.serialize((p.k, p.empirical, p.lower, p.upper, p.model))?;
        }
        flush(w)
    }

    pub fn write_level_sets_csv(&self, out: impl std::io::Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["c", "source", "x1", "x2"])?;
        for p in &self.level_sets {
            w.serialize((p.c, &p.source, p.x1, p.x2))?;
        }
        flush(w)
    }

    pub fn write_exceedance_csv(&self, out: impl std::io::Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["x", "model", "empirical"])?;
        for p in &self.exceedance {
            w.serialize((p.x, p.model, p.empirical))?;
        }
        flush(w)
    }
}

fn flush<W: std::io::Write>(mut w: csv::Writer<W>) -> Result<()> {
    w.flush().map_err(|source| Error::Io {
        path: "<csv>".into(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::sample_maxlinear;

    #[test]
    fn published_matrix_arithmetic() {
        let b = DMatrix::from_row_slice(2, 4, &[0.41, 0.14, 0.43, 0.03, 0.43, 0.44, 0.13, 0.00]);
        let l = maxlinear_stdf(&b, &[1.0, 1.0]);
        assert!((l - 1.33).abs() < 1e-12);
        assert!((2.0 - l - 0.67).abs() < 1e-12);
    }

    #[test]
    fn exceedance_under_complete_dependence() {
        let max = |x: &[f64]| x[0].max(x[1]);
        let p = joint_exceedance(max, 0.01, 0.01);
        // 0.02 − 1 + e^{−0.01}
        assert!((p - 0.010_049_833_749_168_1).abs() < 1e-15);
        // independence gives the second-order term (x1 + x2)² / 2
        let p = joint_exceedance(|x: &[f64]| x[0] + x[1], 0.01, 0.02);
        assert!((p - 0.000_45).abs() < 1e-5);
    }

    #[test]
    fn level_sets_lie_on_the_contour() {
        let b = DMatrix::from_row_slice(2, 3, &[0.5, 0.3, 0.2, 0.4, 0.1, 0.5]);
        for c in [0.2, 1.0] {
            let pts = level_set(|x| maxlinear_stdf(&b, x), c, 21);
            assert_eq!(pts.len(), 21);
            for p in pts {
                assert!((maxlinear_stdf(&b, &p) - c).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn parameter_layout() {
        let m = bivariate_maxlinear(4).unwrap();
        assert_eq!(m.maxlinear_index(0, 3), Some(4));
        assert_eq!(m.maxlinear_index(1, 3), Some(5));
        assert_eq!(m.maxlinear_index(0, 0), None);
        let m3 = bivariate_maxlinear(3).unwrap();
        assert_eq!(m3.maxlinear_index(0, 1), Some(0));
        assert_eq!(m3.maxlinear_index(1, 2), Some(3));
    }

    fn synthetic(n: usize) -> DataMatrix {
        let b = DMatrix::from_row_slice(2, 3, &[0.45, 0.15, 0.4, 0.45, 0.45, 0.1]);
        let z = sample_maxlinear(&b, n, 11).unwrap();
        // Gumbel margins: exponential upper tails
        let rows: Vec<Vec<f64>> = (0..n).map(|i| z.row(i).iter().map(|v| v.ln()).collect()).collect();
        DataMatrix::from_rows(&rows, vec!["A".into(), "B".into()]).unwrap()
    }

    #[test]
    fn pipeline_on_synthetic_returns() {
        let data = synthetic(3000);
        let cfg = StocksConfig {
            chi_ks: vec![100, 60],
            bootstrap: 20,
            n_draws: 5000,
            starts: 8,
            level_points: 11,
            ..StocksConfig::default()
        };
        let rep = analyze(&data, &cfg).unwrap();
        assert_eq!(rep.margins.len(), 2);
        assert_eq!(rep.full.b.len(), 2);
        assert_eq!(rep.full.b[0].len(), 4);
        for row in &rep.full.b {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        assert!(
            (rep.full.chi - rep.chi_hat).abs() < 0.15,
            "{} vs {}",
            rep.full.chi,
            rep.chi_hat
        );
        assert_eq!(rep.chi_path.len(), 2);
        assert!(rep.chi_path.iter().all(|p| p.lower <= p.upper));
        assert_eq!(rep.level_sets.len(), 4 * 2 * 11);
        assert_eq!(rep.exceedance.len(), 20);
        // empirical joint frequencies fall with the threshold
        assert!(rep.exceedance.windows(2).all(|w| w[1].empirical <= w[0].empirical));
        assert!(rep.factor_test.statistic >= 0.0 && rep.marshall_olkin_test.statistic >= 0.0);
        let mut buf = Vec::new();
        rep.write_exceedance_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 21);
    }

    #[test]
    fn rejects_wrong_shapes() {
        let data = DataMatrix::from_columns(&[vec![1.0, 2.0, 3.0]]).unwrap();
        assert!(analyze(&data, &StocksConfig::default()).is_err());
        let cfg = StocksConfig {
            factors: 2,
            ..StocksConfig::default()
        };
        assert!(analyze(&synthetic(200), &cfg).is_err());
    }
}
