//! Weighted least squares estimation of a parametric tail dependence model
//! from nonparametric estimates on a grid.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::empirical::{EvalGrid, StdfEstimate};
use crate::error::{Error, Result};
use crate::limit::{self, rows, Cone, LimitSpec};
use crate::models::{ldot_at, ModelSpec, ParamSpace};
use crate::optim::{latin_hypercube, least_squares_polish, nelder_mead, Feasible, NelderMeadOptions};

/// Weight matrix Ω of the quadratic form.
#[derive(Clone, Default)]
pub enum Weight {
    #[default]
    Identity,
    Fixed(DMatrix<f64>),
    /// Parameter-dependent weight (continuous updating).
    Updating(Arc<dyn Fn(&[f64]) -> DMatrix<f64> + Send + Sync>),
}

impl fmt::Debug for Weight {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Weight::Identity => f.write_str("Identity"),
            Weight::Fixed(m) => write!(f, "Fixed({}x{})", m.nrows(), m.ncols()),
            Weight::Updating(_) => f.write_str("Updating(..)"),
        }
    }
}

impl Weight {
    fn at(&self, theta: &[f64]) -> Option<DMatrix<f64>> {
        match self {
            Weight::Identity => None,
            Weight::Fixed(m) => Some(m.clone()),
            Weight::Updating(g) => Some(g(theta)),
        }
    }

    /// Reads a headerless CSV matrix.
    pub fn from_csv(path: &std::path::Path) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .from_path(path)
            .map_err(|e| match e.kind() {
                csv::ErrorKind::Io(_) => Error::Io {
                    path: path.to_path_buf(),
                    source: std::io::Error::other(e.to_string()),
                },
                _ => Error::Csv(e),
            })?;
        let mut out = Vec::new();
        for (line, rec) in reader.records().enumerate() {
            let row = rec?
                .iter()
                .map(|c| {
                    c.trim().parse::<f64>().map_err(|_| Error::Parse {
                        row: line + 1,
                        column: "omega".into(),
                        value: c.to_string(),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            out.push(row);
        }
        let m = rows::from_rows(&out).map_err(Error::InvalidInput)?;
        Ok(Weight::Fixed(m))
    }
}

/// Objective `f(θ) = (L̂ − L(θ))ᵀ Ω (L̂ − L(θ))` and its ingredients.
#[derive(Debug, Clone)]
pub struct WlsProblem {
    pub model: ModelSpec,
    pub grid: EvalGrid,
    pub lhat: StdfEstimate,
    pub space: ParamSpace,
    pub omega: Weight,
    pub n: usize,
}

impl WlsProblem {
    pub fn new(model: ModelSpec, grid: EvalGrid, lhat: StdfEstimate, n: usize) -> Result<Self> {
        model.check_grid(&grid)?;
        if lhat.values.len() != grid.q() {
            return Err(Error::DimensionMismatch {
                expected: grid.q(),
                got: lhat.values.len(),
            });
        }
        if grid.q() < model.p() {
            return Err(Error::invalid(format!(
                "grid has q = {} points but the model has p = {} parameters",
                grid.q(),
                model.p()
            )));
        }
        if lhat.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("nonparametric estimate".into()));
        }
        let space = model.space();
        Ok(Self {
            model,
            grid,
            lhat,
            space,
            omega: Weight::Identity,
            n,
        })
    }

    /// Sets a constant or parameter-dependent weight matrix. Constant
    /// matrices must be symmetric positive definite.
    pub fn with_weight(mut self, omega: Weight) -> Result<Self> {
        if let Weight::Fixed(m) = &omega {
            let q = self.grid.q();
            if m.nrows() != q || m.ncols() != q {
                return Err(Error::DimensionMismatch {
                    expected: q,
                    got: m.nrows(),
                });
            }
            if (m - m.transpose()).abs().max() > 1e-10 * m.abs().max().max(1.0) {
                return Err(Error::invalid("Ω is not symmetric"));
            }
            if m.clone().cholesky().is_none() {
                return Err(Error::invalid("Ω is not positive definite"));
            }
        }
        self.omega = omega;
        Ok(self)
    }

    pub fn k(&self) -> usize {
        self.lhat.k
    }

    /// `D(θ) = L̂ − L(θ)`.
    pub fn residual(&self, theta: &[f64]) -> Result<Vec<f64>> {
        let f = self.model.at(theta)?;
        Ok(self
            .grid
            .points()
            .iter()
            .zip(&self.lhat.values)
            .map(|(c, v)| v - f.value_unchecked(c))
            .collect())
    }

    fn quadratic(&self, theta: &[f64], d: &[f64]) -> f64 {
        match self.omega.at(theta) {
            None => d.iter().map(|v| v * v).sum(),
            Some(o) => {
                let dv = DVector::from_column_slice(d);
                dv.dot(&(o * &dv))
            }
        }
    }

    /// `f(θ)`; `+∞` outside the parameter space.
    pub fn objective(&self, theta: &[f64]) -> f64 {
        match self.residual(theta) {
            Ok(d) => self.quadratic(theta, &d),
            Err(_) => f64::INFINITY,
        }
    }

    pub fn fit(&self, opts: &FitOptions) -> Result<FitResult> {
        self.fit_restricted(&[], opts)
    }

    /// Minimizes over the coordinates not listed in `fixed`, which are
    /// pinned to the given values.
    pub fn fit_restricted(&self, fixed: &[(usize, f64)], opts: &FitOptions) -> Result<FitResult> {
        let p = self.model.p();
        let mut base = vec![f64::NAN; p];
        for &(i, v) in fixed {
            if i >= p {
                return Err(Error::invalid(format!("fixed coordinate {i} out of range")));
            }
            if !base[i].is_nan() {
                return Err(Error::invalid(format!("coordinate {i} fixed twice")));
            }
            if v < self.space.lower[i] - 1e-9 || v > self.space.upper[i] + 1e-9 {
                return Err(Error::OutOfDomain(format!(
                    "fixed value {v} for coordinate {i} outside its bounds"
                )));
            }
            base[i] = v.clamp(self.space.lower[i], self.space.upper[i]);
        }
        let free: Vec<usize> = (0..p).filter(|&i| base[i].is_nan()).collect();
        let kept: Vec<usize> = fixed.iter().map(|f| f.0).collect();
        let reduced = self.reduced_feasible(&base, &free)?;
        let embed = |x: &[f64]| -> Vec<f64> {
            let mut t = base.clone();
            for (&i, &v) in free.iter().zip(x) {
                t[i] = v;
            }
            t
        };

        let (theta, fval, evals, converged, n_starts) = if free.is_empty() {
            (base.clone(), self.objective(&base), 1, true, 0)
        } else {
            let f = |x: &[f64]| self.objective(&embed(x));
            let search_lo: Vec<f64> = free.iter().map(|&i| self.space.search_lower[i]).collect();
            let search_hi: Vec<f64> = free.iter().map(|&i| self.space.search_upper[i]).collect();
            let width: Vec<f64> = search_lo.iter().zip(&search_hi).map(|(a, b)| b - a).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            let mut starts = latin_hypercube(&mut rng, opts.starts, &search_lo, &search_hi);
            if let Some(h) = &opts.hint {
                if h.len() != p {
                    return Err(Error::DimensionMismatch {
                        expected: p,
                        got: h.len(),
                    });
                }
                starts.push(free.iter().map(|&i| h[i]).collect());
            }
            for s in &mut starts {
                reduced.project(s);
            }
            let omega_fixed = match &self.omega {
                Weight::Fixed(m) => Some(m.clone()),
                _ => None,
            };
            let polish = !matches!(self.omega, Weight::Updating(_)) && opts.polish;
            let runs: Vec<(Vec<f64>, f64, usize, bool)> = starts
                .par_iter()
                .map(|s| {
                    let nm = nelder_mead(&f, s, &reduced, &width, opts.nelder_mead);
                    let mut best = (nm.x, nm.f, nm.evals, nm.converged);
                    if polish && best.1.is_finite() {
                        let rj = |x: &[f64]| -> Option<(Vec<f64>, DMatrix<f64>)> {
                            let t = embed(x);
                            let fm = self.model.at(&t).ok()?;
                            let d = self.residual(&t).ok()?;
                            let ld = ldot_at(&self.model, &fm, &t, &self.grid, &self.space);
                            Some((d, ld.matrix.select_columns(&free)))
                        };
                        if let Some(m) = least_squares_polish(&rj, omega_fixed.as_ref(), &best.0, &reduced, 50) {
                            best.2 += m.evals;
                            if m.f <= best.1 {
                                best = (m.x, m.f, best.2, best.3 || m.converged);
                            }
                        }
                    }
                    let full = self.model.align_factors(&embed(&best.0), opts.hint.as_deref(), &kept);
                    (full, best.1, best.2, best.3)
                })
                .collect();
            let n_starts = runs.len();
            let evals = runs.iter().map(|r| r.2).sum();
            let best = runs
                .into_iter()
                .filter(|r| r.1.is_finite())
                .reduce(|a, b| {
                    let tol = 1e-12 * (1.0 + a.1.abs().min(b.1.abs()));
                    if b.1 < a.1 - tol {
                        b
                    } else if (b.1 - a.1).abs() <= tol && norm(&b.0) < norm(&a.0) {
                        b
                    } else {
                        a
                    }
                })
                .ok_or_else(|| Error::NonConvergence("every start has a non-finite objective".into()))?;
            (best.0, best.1, evals, best.3, n_starts)
        };
        if !fval.is_finite() {
            return Err(Error::NonFinite(format!("objective at {theta:?}")));
        }
        let boundary_active = (0..p).map(|i| self.space.on_boundary(&theta, i)).collect();
        let mut result = FitResult {
            theta_hat: theta,
            objective: fval,
            k: self.k(),
            converged,
            n_starts,
            n_evals: evals,
            boundary_active,
            std_errors: None,
            j: None,
            sigma: None,
            cal_j: None,
            ldot: None,
            smallest_singular_value: None,
            tie: false,
            fixed: fixed.to_vec(),
        };
        if opts.limit {
            self.attach_limit(&mut result)?;
        }
        Ok(result)
    }

    fn reduced_feasible(&self, base: &[f64], free: &[usize]) -> Result<Feasible> {
        let pos = |i: usize| free.iter().position(|&f| f == i);
        let mut groups = Vec::new();
        for (idx, cap) in &self.space.groups {
            let pinned: f64 = idx.iter().filter(|&&i| pos(i).is_none()).map(|&i| base[i]).sum();
            let members: Vec<usize> = idx.iter().filter_map(|&i| pos(i)).collect();
            let rest = cap - pinned;
            let floor: f64 = members.iter().map(|&m| self.space.lower[free[m]]).sum();
            if rest < floor - 1e-9 {
                return Err(Error::OutOfDomain(format!(
                    "fixed values exceed the cap {cap} of a constraint group"
                )));
            }
            if !members.is_empty() {
                groups.push((members, rest.max(floor)));
            }
        }
        Ok(Feasible {
            lower: free.iter().map(|&i| self.space.lower[i]).collect(),
            upper: free.iter().map(|&i| self.space.upper[i]).collect(),
            groups,
        })
    }

    /// Computes `J`, `Σ`, `𝒥`, `L̇` at θ̂ and sandwich standard errors.
    pub fn attach_limit(&self, fit: &mut FitResult) -> Result<()> {
        let omega = self.omega.at(&fit.theta_hat);
        let cone = Cone::free(self.model.p(), Vec::new())?;
        let f = self.model.at(&fit.theta_hat)?;
        let ld = ldot_at(&self.model, &f, &fit.theta_hat, &self.grid, &self.space);
        let sigma = limit::sigma_at(&f, &self.grid);
        let spec = limit::from_parts(ld.matrix, sigma, omega, cone, ld.smallest_singular_value)?;
        fit.std_errors = spec.sandwich().ok().map(|cov| {
            (0..cov.nrows())
                .map(|i| (cov[(i, i)].max(0.0) / self.k() as f64).sqrt())
                .collect()
        });
        fit.tie = ld.tie;
        fit.smallest_singular_value = Some(spec.smallest_singular_value);
        fit.j = Some(spec.j);
        fit.sigma = Some(spec.sigma);
        fit.cal_j = Some(spec.cal_j);
        fit.ldot = Some(spec.ldot);
        Ok(())
    }

    /// Limit ingredients at the fitted value.
    pub fn limit_spec(&self, theta: &[f64], cone: &Cone) -> Result<LimitSpec> {
        let omega = self.omega.at(theta);
        limit::limit_ingredients(&self.model, theta, &self.grid, omega.as_ref(), cone)
    }
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

#[derive(Debug, Clone)]
pub struct FitOptions {
    /// Latin-hypercube starting points (a hint adds one more).
    pub starts: usize,
    pub seed: u64,
    /// Extra starting value and reference for factor labelling.
    pub hint: Option<Vec<f64>>,
    pub nelder_mead: NelderMeadOptions,
    /// Run the Gauss–Newton polish after each simplex search.
    pub polish: bool,
    /// Compute `J`, `Σ`, `𝒥` and standard errors at θ̂.
    pub limit: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            starts: 20,
            seed: 0,
            hint: None,
            nelder_mead: NelderMeadOptions::default(),
            polish: true,
            limit: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitResult {
    pub theta_hat: Vec<f64>,
    pub objective: f64,
    pub k: usize,
    pub converged: bool,
    pub n_starts: usize,
    pub n_evals: usize,
    pub boundary_active: Vec<bool>,
    pub std_errors: Option<Vec<f64>>,
    #[serde(rename = "J", with = "rows::opt")]
    pub j: Option<DMatrix<f64>>,
    #[serde(rename = "Sigma", with = "rows::opt")]
    pub sigma: Option<DMatrix<f64>>,
    #[serde(rename = "calJ", with = "rows::opt")]
    pub cal_j: Option<DMatrix<f64>>,
    #[serde(rename = "Ldot", with = "rows::opt")]
    pub ldot: Option<DMatrix<f64>>,
    pub smallest_singular_value: Option<f64>,
    /// Some gradient entry was taken at a max-linear tie.
    pub tie: bool,
    /// Coordinates pinned during a restricted fit.
    pub fixed: Vec<(usize, f64)>,
}

/// Standard errors of θ̂: sandwich values for coordinates that are free in
/// `cone`, simulated projected-limit spreads for constrained ones.
pub fn std_errors(fit: &FitResult, k: usize, cone: &Cone, n_draws: usize, seed: u64) -> Result<Vec<f64>> {
    let (Some(j), Some(cal_j), Some(ldot), Some(sigma)) = (&fit.j, &fit.cal_j, &fit.ldot, &fit.sigma) else {
        return Err(Error::invalid("fit carries no limit ingredients"));
    };
    let spec = LimitSpec {
        j: j.clone(),
        sigma: sigma.clone(),
        cal_j: cal_j.clone(),
        ldot: ldot.clone(),
        omega: None,
        cone: cone.clone(),
        h: cone.selection(),
        smallest_singular_value: fit.smallest_singular_value.unwrap_or(f64::NAN),
    };
    limit::standard_errors(&spec, k, n_draws, seed)
}
