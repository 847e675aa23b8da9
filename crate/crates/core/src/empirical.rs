//! Rank-based nonparametric estimators of the stable tail dependence function.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{ranks, DataMatrix, RankMatrix};
use crate::error::{Error, Result};
use crate::special::BetaCdfTable;

/// Nonparametric estimator used as the input of the least squares fit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    /// Empirical tail dependence function (rank indicator counts).
    Empirical,
    /// Beta tail dependence function (empirical beta copula).
    Beta,
}

impl EstimatorKind {
    pub fn label(self) -> &'static str {
        match self {
            EstimatorKind::Empirical => "emp",
            EstimatorKind::Beta => "beta",
        }
    }
}

impl std::str::FromStr for EstimatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "empirical" | "emp" => Ok(EstimatorKind::Empirical),
            "beta" => Ok(EstimatorKind::Beta),
            other => Err(Error::invalid(format!("unknown estimator `{other}`"))),
        }
    }
}

/// Evaluation points `c_1, …, c_q` in `[0, ∞)^d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<f64>>", into = "Vec<Vec<f64>>")]
pub struct EvalGrid {
    points: Vec<Vec<f64>>,
}

impl EvalGrid {
    pub fn new(points: Vec<Vec<f64>>) -> Result<Self> {
        let Some(first) = points.first() else {
            return Err(Error::invalid("grid needs at least one point"));
        };
        let d = first.len();
        for (m, p) in points.iter().enumerate() {
            if p.len() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    got: p.len(),
                });
            }
            if p.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(Error::invalid(format!("grid point {m} leaves [0, inf)^d")));
            }
        }
        for a in 0..points.len() {
            for b in a + 1..points.len() {
                if points[a] == points[b] {
                    return Err(Error::invalid(format!("grid points {a} and {b} coincide")));
                }
            }
        }
        Ok(Self { points })
    }

    /// Like [`EvalGrid::new`] but additionally rejects the origin.
    pub fn strict(points: Vec<Vec<f64>>) -> Result<Self> {
        if let Some(m) = points.iter().position(|p| p.iter().all(|&v| v == 0.0)) {
            return Err(Error::invalid(format!("grid point {m} is the origin")));
        }
        Self::new(points)
    }

    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }

    pub fn q(&self) -> usize {
        self.points.len()
    }

    pub fn d(&self) -> usize {
        self.points[0].len()
    }

    /// Grid read from a headerless CSV file, one point per line.
    pub fn from_csv(path: &Path) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new().has_headers(false).from_path(path)?;
        let mut points = Vec::new();
        for (line, rec) in reader.records().enumerate() {
            let rec = rec?;
            let p = rec
                .iter()
                .map(|c| {
                    c.trim().parse::<f64>().map_err(|_| Error::Parse {
                        row: line + 1,
                        column: "grid".into(),
                        value: c.to_string(),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            points.push(p);
        }
        Self::new(points)
    }

    pub fn permuted(&self, order: &[usize]) -> Self {
        Self {
            points: order.iter().map(|&i| self.points[i].clone()).collect(),
        }
    }
}

impl TryFrom<Vec<Vec<f64>>> for EvalGrid {
    type Error = Error;

    fn try_from(points: Vec<Vec<f64>>) -> Result<Self> {
        Self::new(points)
    }
}

impl From<EvalGrid> for Vec<Vec<f64>> {
    fn from(g: EvalGrid) -> Self {
        g.points
    }
}

/// Estimates of ℓ on an evaluation grid, in grid order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StdfEstimate {
    pub values: Vec<f64>,
    pub k: usize,
    pub estimator_kind: EstimatorKind,
}

impl StdfEstimate {
    /// Writes `(c_1, …, c_d, value)` rows with a header.
    pub fn write_csv(&self, grid: &EvalGrid, out: &mut impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header: Vec<String> = (1..=grid.d()).map(|j| format!("c_{j}")).collect();
        header.push("value".into());
        w.write_record(&header)?;
        for (p, v) in grid.points().iter().zip(&self.values) {
            let mut rec: Vec<String> = p.iter().map(|c| c.to_string()).collect();
            rec.push(format!("{v:.12}"));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|source| Error::Io {
            path: "<stdf estimate>".into(),
            source,
        })
    }
}

fn check_args(ranks: &RankMatrix, k: usize, x: &[f64]) -> Result<()> {
    if x.len() != ranks.d() {
        return Err(Error::DimensionMismatch {
            expected: ranks.d(),
            got: x.len(),
        });
    }
    if k == 0 || k > ranks.n() {
        return Err(Error::invalid(format!("k = {k} must lie in 1..={}", ranks.n())));
    }
    if x.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::OutOfDomain(format!("{x:?} is not in [0, inf)^d")));
    }
    Ok(())
}

/// Empirical tail dependence function
/// `(1/k) #{i : R_ij > n + 1/2 - k x_j for some j}`.
pub fn empirical_stdf(ranks: &RankMatrix, k: usize, x: &[f64]) -> Result<f64> {
    check_args(ranks, k, x)?;
    let thresholds = empirical_thresholds(ranks.n(), k, x);
    let count = (0..ranks.n())
        .filter(|&i| exceeds_any(ranks.row(i), &thresholds))
        .count();
    Ok(count as f64 / k as f64)
}

fn empirical_thresholds(n: usize, k: usize, x: &[f64]) -> Vec<f64> {
    x.iter().map(|&xj| n as f64 + 0.5 - k as f64 * xj).collect()
}

#[inline]
fn exceeds_any(row: &[u32], thresholds: &[f64]) -> bool {
    row.iter().zip(thresholds).any(|(&r, &t)| f64::from(r) > t)
}

/// Beta tail dependence function `(n/k) {1 - C_n^β(1 - k x / n)}`.
pub fn beta_stdf(ranks: &RankMatrix, k: usize, x: &[f64]) -> Result<f64> {
    check_args(ranks, k, x)?;
    let n = ranks.n();
    let mut tables = BetaTables::new(n);
    let us = beta_arguments(n, k, x)?;
    let idx: Vec<usize> = us.iter().map(|&u| tables.index_of(u)).collect();
    Ok(beta_sum(ranks, k, &tables, &idx))
}

fn beta_arguments(n: usize, k: usize, x: &[f64]) -> Result<Vec<f64>> {
    x.iter()
        .map(|&xj| {
            let u = 1.0 - k as f64 * xj / n as f64;
            if u < 0.0 {
                Err(Error::OutOfDomain(format!(
                    "k x_j / n = {} exceeds one",
                    k as f64 * xj / n as f64
                )))
            } else {
                Ok(u)
            }
        })
        .collect()
}

/// `(1/k) Σ_i [1 - Π_j F_{n,R_ij}(u_j)]`, accumulated through the
/// complements so that no cancellation occurs when every factor is near one.
fn beta_sum(ranks: &RankMatrix, k: usize, tables: &BetaTables, idx: &[usize]) -> f64 {
    let mut total = 0.0;
    for i in 0..ranks.n() {
        let mut keep = 1.0; // Π of F over processed coordinates
        let mut out = 0.0; // 1 - keep
        for (j, &r) in ranks.row(i).iter().enumerate() {
            let t = &tables.tables[idx[j]];
            out += keep * t.sf(r);
            keep *= t.cdf(r);
        }
        total += out;
    }
    total / k as f64
}

/// Beta distribution tables keyed by argument, shared across grid points.
struct BetaTables {
    n: usize,
    keys: Vec<u64>,
    tables: Vec<BetaCdfTable>,
}

impl BetaTables {
    fn new(n: usize) -> Self {
        Self {
            n,
            keys: Vec::new(),
            tables: Vec::new(),
        }
    }

    fn index_of(&mut self, u: f64) -> usize {
        let key = u.to_bits();
        if let Some(i) = self.keys.iter().position(|&k| k == key) {
            return i;
        }
        self.keys.push(key);
        self.tables.push(BetaCdfTable::new(self.n, u));
        self.tables.len() - 1
    }
}

/// Evaluates the chosen estimator at every grid point.
pub fn estimate_on_grid(ranks: &RankMatrix, k: usize, grid: &EvalGrid, kind: EstimatorKind) -> Result<StdfEstimate> {
    if grid.d() != ranks.d() {
        return Err(Error::DimensionMismatch {
            expected: ranks.d(),
            got: grid.d(),
        });
    }
    for p in grid.points() {
        check_args(ranks, k, p)?;
    }
    let values = match kind {
        EstimatorKind::Empirical => empirical_on_grid(ranks, k, grid),
        EstimatorKind::Beta => {
            let n = ranks.n();
            let mut tables = BetaTables::new(n);
            let idx = grid
                .points()
                .iter()
                .map(|p| beta_arguments(n, k, p).map(|us| us.iter().map(|&u| tables.index_of(u)).collect::<Vec<_>>()))
                .collect::<Result<Vec<_>>>()?;
            idx.par_iter().map(|ix| beta_sum(ranks, k, &tables, ix)).collect()
        }
    };
    Ok(StdfEstimate {
        values,
        k,
        estimator_kind: kind,
    })
}

/// Only rows exceeding the loosest per-column threshold can contribute, so
/// those are collected once and reused for every grid point.
fn empirical_on_grid(ranks: &RankMatrix, k: usize, grid: &EvalGrid) -> Vec<f64> {
    let d = ranks.d();
    let mut x_max = vec![0.0f64; d];
    for p in grid.points() {
        for (m, &v) in x_max.iter_mut().zip(p) {
            *m = m.max(v);
        }
    }
    let loosest = empirical_thresholds(ranks.n(), k, &x_max);
    let candidates: Vec<usize> = (0..ranks.n())
        .filter(|&i| exceeds_any(ranks.row(i), &loosest))
        .collect();
    grid.points()
        .iter()
        .map(|p| {
            let t = empirical_thresholds(ranks.n(), k, p);
            let count = candidates.iter().filter(|&&i| exceeds_any(ranks.row(i), &t)).count();
            count as f64 / k as f64
        })
        .collect()
}

/// Estimator of ℓ at a single point.
pub fn stdf_at(ranks: &RankMatrix, k: usize, x: &[f64], kind: EstimatorKind) -> Result<f64> {
    match kind {
        EstimatorKind::Empirical => empirical_stdf(ranks, k, x),
        EstimatorKind::Beta => beta_stdf(ranks, k, x),
    }
}

/// Tail dependence coefficient estimate `2 - ℓ̂(1, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChiEstimate {
    /// Unclamped `2 - ℓ̂(1,1)`.
    pub raw: f64,
    /// `raw` clamped to `[0, 1]` for reporting.
    pub value: f64,
}

pub fn chi_hat(ranks: &RankMatrix, k: usize, kind: EstimatorKind) -> Result<ChiEstimate> {
    if ranks.d() != 2 {
        return Err(Error::DimensionMismatch {
            expected: 2,
            got: ranks.d(),
        });
    }
    let raw = 2.0 - stdf_at(ranks, k, &[1.0, 1.0], kind)?;
    Ok(ChiEstimate {
        raw,
        value: raw.clamp(0.0, 1.0),
    })
}

/// Pointwise percentile bootstrap band for χ̂ along a path of `k` values.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChiBand {
    pub k: usize,
    pub chi: f64,
    pub lower: f64,
    pub upper: f64,
}

/// Nonparametric pairs bootstrap: rows are resampled with replacement and
/// ranks recomputed on every resample.
pub fn bootstrap_chi_path(
    data: &DataMatrix,
    ks: &[usize],
    kind: EstimatorKind,
    resamples: usize,
    confidence: f64,
    seed: u64,
) -> Result<Vec<ChiBand>> {
    if data.d() != 2 {
        return Err(Error::DimensionMismatch {
            expected: 2,
            got: data.d(),
        });
    }
    if resamples == 0 {
        return Err(Error::invalid("bootstrap needs at least one resample"));
    }
    let base = ranks(data);
    let n = data.n();
    let draws: Vec<Vec<f64>> = (0..resamples)
        .into_par_iter()
        .map(|b| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ b as u64);
            let rows: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
            let r = ranks(&data.select_rows(&rows));
            ks.iter()
                .map(|&k| chi_hat(&r, k, kind).map(|c| c.raw))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let alpha = (1.0 - confidence) / 2.0;
    ks.iter()
        .enumerate()
        .map(|(i, &k)| {
            let mut v: Vec<f64> = draws.iter().map(|d| d[i]).collect();
            v.sort_by(f64::total_cmp);
            Ok(ChiBand {
                k,
                chi: chi_hat(&base, k, kind)?.raw,
                lower: empirical_quantile(&v, alpha),
                upper: empirical_quantile(&v, 1.0 - alpha),
            })
        })
        .collect()
}

/// Inverse of the empirical distribution function of sorted values.
pub fn empirical_quantile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let idx = ((p * n as f64).ceil() as usize).clamp(1, n) - 1;
    sorted[idx]
}
