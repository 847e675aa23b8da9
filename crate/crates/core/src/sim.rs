//! Samplers for max-linear and Brown–Resnick data, evaluation grids, and the
//! Monte Carlo harness for estimation error, level and power.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp1, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{ranks, DataMatrix};
use crate::empirical::{estimate_on_grid, EstimatorKind, EvalGrid};
use crate::error::{Error, Result};
use crate::limit::{psd_sqrt, DEFAULT_DRAWS};
use crate::models::{check_rows, Family, ModelSpec};
use crate::testing::{run_tests, StatisticKind, TestSpec};
use crate::wls::{FitOptions, WlsProblem};

/// Coordinate values of the pairwise max-linear grid.
pub const PAIR_GRID_VALUES: [f64; 13] = [0.0, 0.01, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 0.99, 1.0];

/// Largest share of failed replicates a cell may have.
pub const MAX_FAILURE_RATE: f64 = 0.01;

/// `n` rows of `Z_j = max_t b_jt S_t` with independent unit Fréchet `S_t`.
///
/// All-zero columns are accepted: such a factor never attains a maximum.
pub fn sample_maxlinear(b: &DMatrix<f64>, n: usize, seed: u64) -> Result<DataMatrix> {
    let (d, r) = b.shape();
    if d == 0 || r == 0 {
        return Err(Error::invalid("loading matrix is empty"));
    }
    if n < 2 {
        return Err(Error::invalid(format!("sample size {n} must be at least 2")));
    }
    check_rows(b)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = Vec::with_capacity(n * d);
    let mut s = vec![0.0; r];
    for _ in 0..n {
        for st in &mut s {
            let u: f64 = rng.random();
            *st = -1.0 / u.ln();
        }
        for j in 0..d {
            values.push((0..r).map(|t| b[(j, t)] * s[t]).fold(0.0, f64::max));
        }
    }
    Ok(DataMatrix::from_flat_unchecked(values, n, d))
}

/// Brown–Resnick sampler with semivariogram `γ(h) = (‖h‖/ρ)^α`.
///
/// Each row is a maximum of Poisson-weighted spectral functions
/// `exp(W(s) − W(s_J) − γ(s − s_J))` with `J` uniform over the sites,
/// normalized by their mean over the sites. Normalized functions are bounded
/// by `d`, so the running maximum is final once `d/Γ_i` drops below its
/// smallest coordinate. `accuracy` caps the number of spectral functions per
/// row; rows that reach the cap are approximate and counted.
#[derive(Debug, Clone)]
pub struct BrownResnickSampler {
    roots: Vec<DMatrix<f64>>,
    drift: Vec<Vec<f64>>,
}

impl BrownResnickSampler {
    pub fn new(locations: &[[f64; 2]], rho: f64, alpha: f64) -> Result<Self> {
        let d = locations.len();
        if d < 2 {
            return Err(Error::invalid("need at least two locations"));
        }
        if !(rho > 0.0 && rho.is_finite()) || !(alpha > 0.0 && alpha <= 2.0) {
            return Err(Error::invalid(format!(
                "invalid Brown–Resnick parameters ρ = {rho}, α = {alpha}"
            )));
        }
        let gamma =
            |a: [f64; 2], b: [f64; 2]| (((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt() / rho).powf(alpha);
        for i in 0..d {
            for k in 0..i {
                if locations[i] == locations[k] {
                    return Err(Error::invalid(format!("locations {k} and {i} coincide")));
                }
            }
        }
        let mut roots = Vec::with_capacity(d);
        let mut drift = Vec::with_capacity(d);
        for j in 0..d {
            let g: Vec<f64> = locations.iter().map(|&s| gamma(s, locations[j])).collect();
            let cov = DMatrix::from_fn(d, d, |i, k| g[i] + g[k] - gamma(locations[i], locations[k]));
            roots.push(psd_sqrt(&cov));
            drift.push(g);
        }
        Ok(Self { roots, drift })
    }

    pub fn d(&self) -> usize {
        self.drift.len()
    }

    /// Returns the sample and the number of rows that hit the accuracy cap.
    pub fn sample(&self, n: usize, seed: u64, accuracy: usize) -> Result<(DataMatrix, usize)> {
        if n < 2 {
            return Err(Error::invalid(format!("sample size {n} must be at least 2")));
        }
        if accuracy == 0 {
            return Err(Error::invalid("accuracy must be positive"));
        }
        let d = self.d();
        let df = d as f64;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut values = Vec::with_capacity(n * d);
        let mut capped = 0;
        let mut e = DVector::zeros(d);
        let mut y = vec![0.0; d];
        for _ in 0..n {
            let mut z = vec![0.0f64; d];
            let mut zmin = 0.0;
            let mut arrival = 0.0;
            let mut done = false;
            for _ in 0..accuracy {
                arrival += rng.sample::<f64, _>(Exp1);
                let zeta = 1.0 / arrival;
                if zeta * df <= zmin {
                    done = true;
                    break;
                }
                let j = rng.random_range(0..d);
                for v in e.iter_mut() {
                    *v = rng.sample(StandardNormal);
                }
                let w = &self.roots[j] * &e;
                let mut total = 0.0;
                for i in 0..d {
                    y[i] = (w[i] - self.drift[j][i]).exp();
                    total += y[i];
                }
                let scale = zeta * df / total;
                for i in 0..d {
                    z[i] = z[i].max(scale * y[i]);
                }
                zmin = z.iter().cloned().fold(f64::INFINITY, f64::min);
            }
            if !done {
                capped += 1;
            }
            values.extend_from_slice(&z);
        }
        Ok((DataMatrix::from_flat_unchecked(values, n, d), capped))
    }
}

/// Brown–Resnick sample at the given locations; see [`BrownResnickSampler`].
pub fn sample_brown_resnick(
    locations: &[[f64; 2]],
    rho: f64,
    alpha: f64,
    n: usize,
    seed: u64,
    accuracy: usize,
) -> Result<DataMatrix> {
    Ok(BrownResnickSampler::new(locations, rho, alpha)?
        .sample(n, seed, accuracy)?
        .0)
}

/// Locations of an `nx × ny` grid with unit spacing, row by row.
pub fn regular_locations(nx: usize, ny: usize) -> Vec<[f64; 2]> {
    (0..ny)
        .flat_map(|y| (0..nx).map(move |x| [x as f64, y as f64]))
        .collect()
}

/// Default evaluation grid for a model.
///
/// Brown–Resnick: the indicator vectors of all location pairs at distance
/// at most √2. Other families: the 13 × 13 value grid placed on every
/// coordinate pair, keeping points with two positive coordinates.
pub fn grid_recipe(model: &ModelSpec) -> Result<EvalGrid> {
    let d = model.d();
    let mut points = Vec::new();
    if model.family() == Family::BrownResnick {
        let locs = model.locations();
        for a in 0..d {
            for b in a + 1..d {
                let h = ((locs[a][0] - locs[b][0]).powi(2) + (locs[a][1] - locs[b][1]).powi(2)).sqrt();
                if h <= std::f64::consts::SQRT_2 + 1e-9 {
                    let mut x = vec![0.0; d];
                    x[a] = 1.0;
                    x[b] = 1.0;
                    points.push(x);
                }
            }
        }
        if points.is_empty() {
            return Err(Error::invalid("no pair of locations is within distance √2"));
        }
    } else {
        let positive = &PAIR_GRID_VALUES[1..];
        for a in 0..d {
            for b in a + 1..d {
                for &u in positive {
                    for &v in positive {
                        let mut x = vec![0.0; d];
                        x[a] = u;
                        x[b] = v;
                        points.push(x);
                    }
                }
            }
        }
    }
    EvalGrid::new(points)
}

/// Null hypothesis and statistics of a testing design.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignTest {
    pub tested: Vec<usize>,
    pub beta_star: Vec<f64>,
    pub statistics: Vec<StatisticKind>,
    pub level: f64,
    pub n_draws: usize,
    /// Evaluate the limit law at θ0 instead of the full-model estimate.
    pub limit_at_truth: bool,
}

/// A Monte Carlo experiment: data model, sample sizes and estimation setup.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimDesign {
    pub name: String,
    pub model: ModelSpec,
    pub theta0: Vec<f64>,
    pub n: usize,
    pub ks: Vec<usize>,
    pub replicates: usize,
    pub estimators: Vec<EstimatorKind>,
    pub grid: EvalGrid,
    pub test: Option<DesignTest>,
    pub seed: u64,
    /// Spectral function cap of the Brown–Resnick sampler.
    pub accuracy: usize,
    /// Latin-hypercube starts per fit.
    pub starts: usize,
}

impl SimDesign {
    /// Design with the default grid, n = 5000, 1000 replicates and both
    /// estimators.
    pub fn new(name: &str, model: ModelSpec, theta0: Vec<f64>, ks: Vec<usize>) -> Result<Self> {
        let grid = grid_recipe(&model)?;
        let design = Self {
            name: name.to_string(),
            model,
            theta0,
            n: 5000,
            ks,
            replicates: 1000,
            estimators: vec![EstimatorKind::Empirical, EstimatorKind::Beta],
            grid,
            test: None,
            seed: 0,
            accuracy: 1000,
            starts: 20,
        };
        design.validate()?;
        Ok(design)
    }

    pub fn with_test(
        mut self,
        tested: Vec<usize>,
        beta_star: Vec<f64>,
        statistics: Vec<StatisticKind>,
    ) -> Result<Self> {
        self.test = Some(DesignTest {
            tested,
            beta_star,
            statistics,
            level: 0.05,
            n_draws: DEFAULT_DRAWS,
            limit_at_truth: false,
        });
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.replicates == 0 {
            return Err(Error::invalid("replicates must be at least 1"));
        }
        if self.ks.is_empty() || self.estimators.is_empty() {
            return Err(Error::invalid("design needs at least one k and one estimator"));
        }
        if let Some(&k) = self.ks.iter().find(|&&k| k == 0 || k >= self.n) {
            return Err(Error::invalid(format!("k = {k} must lie in 1..n with n = {}", self.n)));
        }
        self.check_theta(&self.theta0)?;
        self.model.check_grid(&self.grid)?;
        if let Some(t) = &self.test {
            TestSpec {
                tested: t.tested.clone(),
                beta_star: t.beta_star.clone(),
                kind: StatisticKind::Wald,
                level: t.level,
                n_draws: t.n_draws,
                seed: 0,
                limit_at: None,
            }
            .validate()?;
            if t.statistics.is_empty() {
                return Err(Error::invalid("testing design without statistics"));
            }
        }
        Ok(())
    }

    fn check_theta(&self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.model.p() {
            return Err(Error::DimensionMismatch {
                expected: self.model.p(),
                got: theta.len(),
            });
        }
        if !self.model.space().contains(theta, 1e-9) {
            return Err(Error::OutOfDomain(format!("{theta:?} is outside the parameter space")));
        }
        Ok(())
    }

    /// One data set of size `n` from the model at `theta`.
    pub fn simulate(&self, theta: &[f64], seed: u64) -> Result<DataMatrix> {
        match self.model.family() {
            Family::MaxLinear | Family::MarshallOlkin => sample_maxlinear(&self.model.b_matrix(theta)?, self.n, seed),
            Family::BrownResnick => {
                sample_brown_resnick(self.model.locations(), theta[0], theta[1], self.n, seed, self.accuracy)
            }
            Family::Logistic => Err(Error::Unsupported("simulation from the logistic model".into())),
        }
    }

    fn cells(&self) -> Vec<(usize, EstimatorKind)> {
        self.ks
            .iter()
            .flat_map(|&k| self.estimators.iter().map(move |&e| (k, e)))
            .collect()
    }

    fn fit_options(&self, theta_true: &[f64], seed: u64) -> FitOptions {
        FitOptions {
            starts: self.starts,
            seed,
            hint: Some(theta_true.to_vec()),
            limit: false,
            ..FitOptions::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Rmse,
    Level,
    Power,
}

/// One aggregated cell: RMSE per coordinate, or a rejection percentage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub model: String,
    pub k: usize,
    pub estimator: EstimatorKind,
    pub statistic: Option<StatisticKind>,
    /// Parameter of the data-generating model.
    pub theta: Vec<f64>,
    /// Coordinates varied across a power study.
    pub axes: Vec<usize>,
    pub labels: Vec<String>,
    pub values: Vec<f64>,
    /// Monte Carlo standard errors of `values`.
    pub mc_se: Vec<f64>,
    pub n_ok: usize,
    pub n_failed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentTable {
    pub id: String,
    pub metric: Metric,
    pub replicates: usize,
    pub n: usize,
    pub seed: u64,
    /// Set for smoke runs whose values carry little precision.
    pub low_precision: bool,
    pub cells: Vec<Cell>,
}

enum Outcome {
    Error(Vec<f64>),
    Rejects(Vec<bool>),
}

fn replicate(design: &SimDesign, theta_true: &[f64], rep: usize, metric: Metric) -> Result<Vec<Result<Outcome>>> {
    let seed = design.seed ^ rep as u64;
    let data = design.simulate(theta_true, seed)?;
    let rk = ranks(&data);
    Ok(design
        .cells()
        .iter()
        .map(|&(k, kind)| {
            let lhat = estimate_on_grid(&rk, k, &design.grid, kind)?;
            let problem = WlsProblem::new(design.model.clone(), design.grid.clone(), lhat, design.n)?;
            let opts = design.fit_options(theta_true, seed);
            match metric {
                Metric::Rmse => {
                    let fit = problem.fit(&opts)?;
                    Ok(Outcome::Error(
                        fit.theta_hat.iter().zip(&design.theta0).map(|(a, b)| a - b).collect(),
                    ))
                }
                Metric::Level | Metric::Power => {
                    let t = design
                        .test
                        .as_ref()
                        .ok_or_else(|| Error::invalid("design has no test"))?;
                    let spec = TestSpec {
                        tested: t.tested.clone(),
                        beta_star: t.beta_star.clone(),
                        kind: t.statistics[0],
                        level: t.level,
                        n_draws: t.n_draws,
                        seed,
                        limit_at: t.limit_at_truth.then(|| design.theta0.clone()),
                    };
                    let results = run_tests(&problem, &spec, &t.statistics, &opts)?;
                    Ok(Outcome::Rejects(results.iter().map(|r| r.reject).collect()))
                }
            }
        })
        .collect())
}

fn run_cells(design: &SimDesign, theta_true: &[f64], metric: Metric, axes: &[usize]) -> Result<Vec<Cell>> {
    design.validate()?;
    design.check_theta(theta_true)?;
    if metric != Metric::Rmse && design.test.is_none() {
        return Err(Error::invalid(format!("design {} has no test", design.name)));
    }
    let outcomes: Vec<Vec<Result<Outcome>>> = (0..design.replicates)
        .into_par_iter()
        .map(|rep| replicate(design, theta_true, rep, metric))
        .collect::<Result<_>>()?;
    let mut out = Vec::new();
    for (c, &(k, estimator)) in design.cells().iter().enumerate() {
        let column = outcomes.iter().map(|r| &r[c]);
        let n_failed = column.clone().filter(|o| o.is_err()).count();
        let n_ok = design.replicates - n_failed;
        if n_failed as f64 > MAX_FAILURE_RATE * design.replicates as f64 {
            let first = column.clone().find_map(|o| o.as_ref().err()).expect("a failure");
            return Err(Error::NonConvergence(format!(
                "{}: {n_failed} of {} replicates failed at k = {k} ({}); first error: {first}",
                design.name,
                design.replicates,
                estimator.label()
            )));
        }
        let ok: Vec<&Outcome> = column.filter_map(|o| o.as_ref().ok()).collect();
        let base = Cell {
            model: design.name.clone(),
            k,
            estimator,
            statistic: None,
            theta: theta_true.to_vec(),
            axes: axes.to_vec(),
            labels: Vec::new(),
            values: Vec::new(),
            mc_se: Vec::new(),
            n_ok,
            n_failed,
        };
        match metric {
            Metric::Rmse => {
                let p = design.model.p();
                let (values, mc_se) = (0..p)
                    .map(|i| {
                        let sq: Vec<f64> = ok
                            .iter()
                            .map(|o| match o {
                                Outcome::Error(e) => e[i] * e[i],
                                Outcome::Rejects(_) => unreachable!(),
                            })
                            .collect();
                        rmse_with_se(&sq)
                    })
                    .unzip();
                out.push(Cell {
                    labels: design.model.param_names(),
                    values,
                    mc_se,
                    ..base
                });
            }
            Metric::Level | Metric::Power => {
                let stats = &design.test.as_ref().expect("checked above").statistics;
                for (s, &kind) in stats.iter().enumerate() {
                    let rejects = ok
                        .iter()
                        .filter(|o| match o {
                            Outcome::Rejects(r) => r[s],
                            Outcome::Error(_) => unreachable!(),
                        })
                        .count();
                    let (pct, se) = percent_with_se(rejects, ok.len());
                    out.push(Cell {
                        statistic: Some(kind),
                        labels: vec!["percent".into()],
                        values: vec![pct],
                        mc_se: vec![se],
                        ..base.clone()
                    });
                }
            }
        }
    }
    Ok(out)
}

fn rmse_with_se(sq: &[f64]) -> (f64, f64) {
    let m = sq.len() as f64;
    if m == 0.0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = sq.iter().sum::<f64>() / m;
    let rmse = mean.sqrt();
    if m < 2.0 || rmse == 0.0 {
        return (rmse, 0.0);
    }
    let var = sq.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1.0);
    // delta method for the square root of a mean
    (rmse, var.sqrt() / m.sqrt() / (2.0 * rmse))
}

fn percent_with_se(hits: usize, total: usize) -> (f64, f64) {
    if total == 0 {
        return (f64::NAN, f64::NAN);
    }
    let p = hits as f64 / total as f64;
    (100.0 * p, 100.0 * (p * (1.0 - p) / total as f64).sqrt())
}

fn table(design: &SimDesign, metric: Metric, cells: Vec<Cell>) -> ExperimentTable {
    ExperimentTable {
        id: design.name.clone(),
        metric,
        replicates: design.replicates,
        n: design.n,
        seed: design.seed,
        low_precision: false,
        cells,
    }
}

/// Root mean squared error of θ̂ per coordinate at θ0.
pub fn run_rmse(design: &SimDesign) -> Result<ExperimentTable> {
    let cells = run_cells(design, &design.theta0, Metric::Rmse, &[])?;
    Ok(table(design, Metric::Rmse, cells))
}

/// Rejection percentage of the design's null with data generated at θ0.
pub fn run_level(design: &SimDesign) -> Result<ExperimentTable> {
    let cells = run_cells(design, &design.theta0, Metric::Level, &[])?;
    Ok(table(design, Metric::Level, cells))
}

/// Rejection percentages with data generated at each alternative. `axes`
/// names the coordinates that vary across the alternatives; the first one
/// is the abscissa of the plot output.
pub fn run_power(design: &SimDesign, alternatives: &[Vec<f64>], axes: &[usize]) -> Result<ExperimentTable> {
    if alternatives.is_empty() {
        return Err(Error::invalid("no alternatives given"));
    }
    if let Some(&a) = axes.iter().find(|&&a| a >= design.model.p()) {
        return Err(Error::invalid(format!("axis {a} out of range")));
    }
    let mut cells = Vec::new();
    for alt in alternatives {
        cells.extend(run_cells(design, alt, Metric::Power, axes)?);
    }
    Ok(table(design, Metric::Power, cells))
}

/// Places `values` at coordinate `axis` of `base`.
pub fn ray(base: &[f64], axis: usize, values: &[f64]) -> Vec<Vec<f64>> {
    values
        .iter()
        .map(|&v| {
            let mut t = base.to_vec();
            t[axis] = v;
            t
        })
        .collect()
}

/// All combinations of values on two coordinates of `base`.
pub fn plane(base: &[f64], axes: [usize; 2], first: &[f64], second: &[f64]) -> Vec<Vec<f64>> {
    first
        .iter()
        .flat_map(|&u| {
            second.iter().map(move |&v| {
                let mut t = base.to_vec();
                t[axes[0]] = u;
                t[axes[1]] = v;
                t
            })
        })
        .collect()
}

impl ExperimentTable {
    pub fn merge(id: &str, parts: Vec<ExperimentTable>) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::invalid("nothing to merge"))?;
        let mut out = ExperimentTable {
            id: id.to_string(),
            cells: Vec::new(),
            ..first.clone()
        };
        for p in parts {
            if p.metric != out.metric {
                return Err(Error::invalid("cannot merge tables of different metrics"));
            }
            out.low_precision |= p.low_precision;
            out.cells.extend(p.cells);
        }
        Ok(out)
    }

    /// The cell for `(model, k, estimator, statistic)` at the given data
    /// parameter (any parameter when `theta` is `None`).
    pub fn find(
        &self,
        model: &str,
        k: usize,
        estimator: EstimatorKind,
        statistic: Option<StatisticKind>,
        theta: Option<&[f64]>,
    ) -> Option<&Cell> {
        self.cells.iter().find(|c| {
            c.model == model
                && c.k == k
                && c.estimator == estimator
                && c.statistic == statistic
                && theta.is_none_or(|t| {
                    c.theta.len() == t.len() && c.theta.iter().zip(t).all(|(a, b)| (a - b).abs() < 1e-12)
                })
        })
    }

    fn row_key(&self, c: &Cell, label: &str) -> String {
        let mut key = c.model.clone();
        if let Some(s) = c.statistic {
            key.push_str(&format!(" {}", statistic_label(s)));
        }
        for &a in &c.axes {
            key.push_str(&format!(" θ{a}={}", c.theta[a]));
        }
        if self.metric == Metric::Rmse {
            key.push_str(&format!(" {label}"));
        }
        key
    }

    /// Wide layout: one row per model (and statistic or parameter), one
    /// value and one standard-error column per `k × estimator`.
    pub fn write_csv(&self, out: &mut impl Write) -> Result<()> {
        let mut columns: Vec<(usize, EstimatorKind)> = Vec::new();
        let mut rows: Vec<String> = Vec::new();
        let mut entries: Vec<(String, usize, EstimatorKind, f64, f64)> = Vec::new();
        for c in &self.cells {
            if !columns.contains(&(c.k, c.estimator)) {
                columns.push((c.k, c.estimator));
            }
            for ((label, &v), &se) in c.labels.iter().zip(&c.values).zip(&c.mc_se) {
                let key = self.row_key(c, label);
                if !rows.contains(&key) {
                    rows.push(key.clone());
                }
                entries.push((key, c.k, c.estimator, v, se));
            }
        }
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["row".to_string()];
        for (k, e) in &columns {
            header.push(format!("k={k} {}", e.label()));
            header.push(format!("k={k} {} se", e.label()));
        }
        w.write_record(&header)?;
        for row in &rows {
            let mut rec = vec![row.clone()];
            for &(k, e) in &columns {
                match entries.iter().find(|x| &x.0 == row && x.1 == k && x.2 == e) {
                    Some(x) => {
                        rec.push(format!("{:.4}", x.3));
                        rec.push(format!("{:.4}", x.4));
                    }
                    None => {
                        rec.push(String::new());
                        rec.push(String::new());
                    }
                }
            }
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::Io {
            path: "<table>".into(),
            source: e,
        })?;
        Ok(())
    }

    /// Long layout `x, y, se, series` for plotting: `x = k` for RMSE and
    /// level tables, the first varied coordinate for power tables.
    pub fn write_plot_csv(&self, out: &mut impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["x", "y", "se", "series"])?;
        for c in &self.cells {
            for ((label, &v), &se) in c.labels.iter().zip(&c.values).zip(&c.mc_se) {
                let (x, series) = match self.metric {
                    Metric::Rmse => (c.k as f64, format!("{} {label} {}", c.model, c.estimator.label())),
                    Metric::Level => (
                        c.k as f64,
                        format!(
                            "{} {} {}",
                            c.model,
                            c.statistic.map_or("", statistic_label),
                            c.estimator.label()
                        ),
                    ),
                    Metric::Power => {
                        let mut s = format!(
                            "{} {} {} k={}",
                            c.model,
                            c.statistic.map_or("", statistic_label),
                            c.estimator.label(),
                            c.k
                        );
                        for &a in c.axes.iter().skip(1) {
                            s.push_str(&format!(" θ{a}={}", c.theta[a]));
                        }
                        (c.axes.first().map_or(f64::NAN, |&a| c.theta[a]), s)
                    }
                };
                w.write_record([x.to_string(), format!("{v:.6}"), format!("{se:.6}"), series])?;
            }
        }
        w.flush().map_err(|e| Error::Io {
            path: "<plot>".into(),
            source: e,
        })?;
        Ok(())
    }
}

fn statistic_label(s: StatisticKind) -> &'static str {
    match s {
        StatisticKind::Deviance => "T1",
        StatisticKind::Wald => "T2",
    }
}

/// Pairs of consecutive power cells, ordered by distance of the first axis
/// from `null`, whose power drops by more than three combined Monte Carlo
/// standard errors. Cells are grouped by model, k, estimator, statistic and
/// the remaining axes.
pub fn power_monotonicity_violations(table: &ExperimentTable, null: &[f64]) -> Vec<String> {
    let mut groups: Vec<(String, Vec<&Cell>)> = Vec::new();
    for c in &table.cells {
        let Some(&a0) = c.axes.first() else { continue };
        let mut key = format!("{} {:?} {:?} {}", c.model, c.statistic, c.estimator, c.k);
        for &a in &c.axes[1..] {
            key.push_str(&format!(" {a}={}", c.theta[a]));
        }
        let _ = a0;
        match groups.iter_mut().find(|g| g.0 == key) {
            Some(g) => g.1.push(c),
            None => groups.push((key, vec![c])),
        }
    }
    let mut out = Vec::new();
    for (key, mut cells) in groups {
        let a0 = cells[0].axes[0];
        cells.sort_by(|a, b| {
            (a.theta[a0] - null[a0])
                .abs()
                .total_cmp(&(b.theta[a0] - null[a0]).abs())
        });
        for w in cells.windows(2) {
            let se = (w[0].mc_se[0].powi(2) + w[1].mc_se[0].powi(2)).sqrt();
            if w[1].values[0] < w[0].values[0] - 3.0 * se {
                out.push(format!(
                    "{key}: power falls from {:.1} to {:.1} between θ{a0} = {} and {}",
                    w[0].values[0], w[1].values[0], w[0].theta[a0], w[1].theta[a0]
                ));
            }
        }
    }
    out
}

/// The simulation designs of the reproduction experiments.
pub mod designs {
    use super::*;

    pub const TEST_KS: [usize; 4] = [25, 50, 75, 100];

    pub fn rmse_ks() -> Vec<usize> {
        (1..=12).map(|i| 25 * i).collect()
    }

    fn both() -> Vec<StatisticKind> {
        vec![StatisticKind::Deviance, StatisticKind::Wald]
    }

    fn steps(from: f64, to: f64, by: f64) -> Vec<f64> {
        let n = ((to - from) / by).round() as usize;
        (0..=n)
            .map(|i| ((from + i as f64 * by) * 1e10).round() / 1e10)
            .collect()
    }

    /// Three variables, two factors, `b11 = 1` on its upper bound.
    pub fn m1() -> SimDesign {
        SimDesign::new(
            "M1",
            ModelSpec::max_linear(3, 2).expect("valid"),
            vec![1.0, 0.7, 0.2],
            TEST_KS.to_vec(),
        )
        .and_then(|d| d.with_test(vec![0], vec![1.0], both()))
        .expect("valid design")
    }

    /// As M1 with `b31 = 0` also on the boundary.
    pub fn m2() -> SimDesign {
        SimDesign::new(
            "M2",
            ModelSpec::max_linear(3, 2).expect("valid"),
            vec![1.0, 0.7, 0.0],
            TEST_KS.to_vec(),
        )
        .and_then(|d| d.with_test(vec![0, 2], vec![1.0, 0.0], both()))
        .expect("valid design")
    }

    /// Two variables, three factors, `b11 = b22 = 0`.
    pub fn m3() -> SimDesign {
        SimDesign::new(
            "M3",
            ModelSpec::max_linear(2, 3).expect("valid"),
            vec![0.0, 0.8, 0.6, 0.0],
            TEST_KS.to_vec(),
        )
        .and_then(|d| d.with_test(vec![0, 3], vec![0.0, 0.0], both()))
        .expect("valid design")
    }

    /// Three-factor fit to two-factor data. The first column carries the
    /// row-sum remainder, so θ = (b12, b22, b13, b23) and the null is that
    /// the third column vanishes.
    pub fn factor_count() -> SimDesign {
        let model = ModelSpec::max_linear(2, 3)
            .and_then(|m| m.with_dropped_column(0))
            .expect("valid");
        SimDesign::new("factors", model, vec![0.2, 0.4, 0.0, 0.0], TEST_KS.to_vec())
            .and_then(|d| d.with_test(vec![2, 3], vec![0.0, 0.0], both()))
            .expect("valid design")
    }

    /// Smith model (α = 2, ρ = 1) on an `nx × ny` grid, testing `α = 2`.
    pub fn brown_resnick(nx: usize, ny: usize) -> SimDesign {
        let model = ModelSpec::brown_resnick(regular_locations(nx, ny)).expect("valid");
        SimDesign::new(&format!("BR d={}", nx * ny), model, vec![1.0, 2.0], TEST_KS.to_vec())
            .and_then(|d| d.with_test(vec![1], vec![2.0], vec![StatisticKind::Wald]))
            .expect("valid design")
    }

    pub fn m1_power() -> (Vec<Vec<f64>>, Vec<usize>) {
        (ray(&[1.0, 0.7, 0.2], 0, &steps(0.8, 1.0, 0.05)), vec![0])
    }

    pub fn m2_power() -> (Vec<Vec<f64>>, Vec<usize>) {
        (
            plane(&[1.0, 0.7, 0.0], [0, 2], &steps(0.8, 1.0, 0.05), &steps(0.0, 0.2, 0.05)),
            vec![0, 2],
        )
    }

    pub fn m3_power() -> (Vec<Vec<f64>>, Vec<usize>) {
        (
            plane(
                &[0.0, 0.8, 0.6, 0.0],
                [0, 3],
                &steps(0.0, 0.2, 0.05),
                &steps(0.0, 0.2, 0.05),
            ),
            vec![0, 3],
        )
    }

    pub fn factor_power() -> (Vec<Vec<f64>>, Vec<usize>) {
        (
            plane(
                &[0.2, 0.4, 0.0, 0.0],
                [2, 3],
                &steps(0.0, 0.2, 0.05),
                &steps(0.0, 0.2, 0.05),
            ),
            vec![2, 3],
        )
    }

    pub fn brown_resnick_power() -> (Vec<Vec<f64>>, Vec<usize>) {
        (ray(&[1.0, 2.0], 1, &steps(1.5, 2.0, 0.1)), vec![1])
    }
}

/// One run of an experiment.
#[derive(Debug, Clone)]
pub enum Plan {
    Rmse(SimDesign),
    Level(SimDesign),
    Power(SimDesign, Vec<Vec<f64>>, Vec<usize>),
}

impl Plan {
    fn design_mut(&mut self) -> &mut SimDesign {
        match self {
            Plan::Rmse(d) | Plan::Level(d) | Plan::Power(d, _, _) => d,
        }
    }

    fn run(&self) -> Result<ExperimentTable> {
        match self {
            Plan::Rmse(d) => run_rmse(d),
            Plan::Level(d) => run_level(d),
            Plan::Power(d, alts, axes) => run_power(d, alts, axes),
        }
    }
}

pub const EXPERIMENT_IDS: [&str; 10] = ["T1", "T2", "T3", "F1", "F2", "F3", "F4", "F5", "F6", "F7"];

/// Designs of a named reproduction experiment at full settings.
pub fn experiment(id: &str) -> Result<Vec<Plan>> {
    use designs::*;
    let ids = |mut d: SimDesign, ks: &[usize], est: &[EstimatorKind]| {
        d.ks = ks.to_vec();
        d.estimators = est.to_vec();
        d
    };
    let emp = [EstimatorKind::Empirical];
    let both_est = [EstimatorKind::Empirical, EstimatorKind::Beta];
    let with_stats = |mut d: SimDesign, s: Vec<StatisticKind>| {
        if let Some(t) = d.test.as_mut() {
            t.statistics = s;
        }
        d
    };
    let rmse = |d: SimDesign| ids(d, &rmse_ks(), &both_est);
    Ok(match id {
        "T1" => vec![Plan::Level(brown_resnick(3, 2)), Plan::Level(brown_resnick(4, 4))],
        "T2" => vec![Plan::Level(m1()), Plan::Level(m2()), Plan::Level(m3())],
        "T3" => vec![Plan::Level(with_stats(factor_count(), vec![StatisticKind::Wald]))],
        "F1" => vec![
            Plan::Rmse(rmse(brown_resnick(3, 2))),
            Plan::Rmse(rmse(brown_resnick(4, 4))),
        ],
        "F2" => {
            let (alts, axes) = brown_resnick_power();
            vec![
                Plan::Power(brown_resnick(3, 2), alts.clone(), axes.clone()),
                Plan::Power(brown_resnick(4, 4), alts, axes),
            ]
        }
        "F3" => vec![Plan::Rmse(rmse(m1())), Plan::Rmse(rmse(m2())), Plan::Rmse(rmse(m3()))],
        "F4" => {
            let (a1, x1) = m1_power();
            let (a2, x2) = m2_power();
            vec![
                Plan::Power(
                    with_stats(ids(m1(), &[50, 75], &emp), vec![StatisticKind::Deviance]),
                    a1,
                    x1,
                ),
                Plan::Power(
                    with_stats(ids(m2(), &[50], &both_est), vec![StatisticKind::Deviance]),
                    a2,
                    x2,
                ),
            ]
        }
        "F5" => {
            let (a, x) = m3_power();
            vec![Plan::Power(
                with_stats(ids(m3(), &[50], &both_est), vec![StatisticKind::Wald]),
                a,
                x,
            )]
        }
        "F6" => vec![Plan::Rmse(rmse(factor_count()))],
        "F7" => {
            let (a, x) = factor_power();
            vec![Plan::Power(
                with_stats(ids(factor_count(), &[50, 75], &emp), vec![StatisticKind::Wald]),
                a,
                x,
            )]
        }
        other => {
            return Err(Error::invalid(format!(
                "unknown experiment `{other}`; expected one of {}",
                EXPERIMENT_IDS.join(", ")
            )))
        }
    })
}

/// Overrides applied to every design of an experiment.
#[derive(Debug, Clone, Default)]
pub struct ReproduceOptions {
    pub replicates: Option<usize>,
    pub ks: Option<Vec<usize>>,
    pub estimators: Option<Vec<EstimatorKind>>,
    pub n_draws: Option<usize>,
    pub seed: u64,
    /// Ten replicates and 2000 limit draws unless overridden; the table is
    /// flagged as low precision.
    pub smoke: bool,
}

pub const SMOKE_REPLICATES: usize = 10;
pub const SMOKE_DRAWS: usize = 2000;

/// Runs an experiment and merges its tables.
pub fn reproduce(id: &str, opts: &ReproduceOptions) -> Result<ExperimentTable> {
    let mut plans = experiment(id)?;
    for plan in &mut plans {
        let d = plan.design_mut();
        d.seed = opts.seed;
        if opts.smoke {
            d.replicates = SMOKE_REPLICATES;
            if let Some(t) = d.test.as_mut() {
                t.n_draws = SMOKE_DRAWS;
            }
        }
        if let Some(r) = opts.replicates {
            d.replicates = r;
        }
        if let Some(ks) = &opts.ks {
            d.ks = ks.clone();
        }
        if let Some(e) = &opts.estimators {
            d.estimators = e.clone();
        }
        if let (Some(n), Some(t)) = (opts.n_draws, d.test.as_mut()) {
            t.n_draws = n;
        }
        d.validate()?;
    }
    let parts = plans.iter().map(Plan::run).collect::<Result<Vec<_>>>()?;
    let mut out = ExperimentTable::merge(id, parts)?;
    out.low_precision |= opts.smoke;
    Ok(out)
}
