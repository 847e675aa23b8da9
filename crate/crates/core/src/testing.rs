//! Deviance and Wald tests for parameters that may sit on the boundary of
//! the parameter space, with critical values simulated from the limit law.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::limit::{sample_limit, Cone, LimitSample, LimitSpec, DEFAULT_DRAWS};
use crate::wls::{FitOptions, FitResult, WlsProblem};

const GAP_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StatisticKind {
    /// `k (f(θ̂⁽⁰⁾) − f(θ̂))`
    Deviance,
    /// `k (β̂ − β*)ᵀ (H J⁻¹ Hᵀ)⁻¹ (β̂ − β*)`
    Wald,
}

impl std::str::FromStr for StatisticKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "deviance" | "t1" => Ok(StatisticKind::Deviance),
            "wald" | "t2" => Ok(StatisticKind::Wald),
            other => Err(Error::invalid(format!("unknown statistic `{other}`"))),
        }
    }
}

/// `H0: θ_i = β*_i` for the tested coordinates `i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestSpec {
    pub tested: Vec<usize>,
    pub beta_star: Vec<f64>,
    pub kind: StatisticKind,
    pub level: f64,
    pub n_draws: usize,
    pub seed: u64,
    /// Point at which the limit law is evaluated; the full-model estimate
    /// when `None`. Simulation studies may pass the true parameter.
    #[serde(default)]
    pub limit_at: Option<Vec<f64>>,
}

impl TestSpec {
    pub fn new(tested: Vec<usize>, beta_star: Vec<f64>, kind: StatisticKind) -> Result<Self> {
        let spec = Self {
            tested,
            beta_star,
            kind,
            level: 0.05,
            n_draws: DEFAULT_DRAWS,
            seed: 0,
            limit_at: None,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.tested.is_empty() {
            return Err(Error::invalid("a test needs at least one tested coordinate"));
        }
        if self.tested.len() != self.beta_star.len() {
            return Err(Error::DimensionMismatch {
                expected: self.tested.len(),
                got: self.beta_star.len(),
            });
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(Error::invalid(format!("level {} not in (0, 1)", self.level)));
        }
        if self.n_draws == 0 {
            return Err(Error::invalid("n_draws must be at least 1"));
        }
        Ok(())
    }

    /// Parses `"i=v,j=w"` (0-based coordinate indices).
    pub fn parse_null(text: &str) -> Result<(Vec<usize>, Vec<f64>)> {
        let mut tested = Vec::new();
        let mut values = Vec::new();
        for part in text.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            let (i, v) = part
                .split_once('=')
                .ok_or_else(|| Error::invalid(format!("null entry `{part}` is not `index=value`")))?;
            tested.push(
                i.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::invalid(format!("bad coordinate index `{i}`")))?,
            );
            values.push(
                v.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::invalid(format!("bad null value `{v}`")))?,
            );
        }
        if tested.is_empty() {
            return Err(Error::invalid("empty null hypothesis"));
        }
        Ok((tested, values))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TestResult {
    pub statistic: f64,
    pub kind: StatisticKind,
    pub critical_value: f64,
    pub p_value: f64,
    pub level: f64,
    pub reject: bool,
    pub n_draws: usize,
    pub seed: u64,
    pub theta_hat: Vec<f64>,
    pub theta_hat_null: Vec<f64>,
    pub cone: Cone,
    pub warnings: Vec<String>,
    pub fit_full: FitResult,
    pub fit_null: FitResult,
}

/// `k (f_null − f_full)`, with tiny negative gaps treated as zero.
pub fn deviance_statistic(fit_full: &FitResult, fit_null: &FitResult, k: usize) -> Result<f64> {
    let gap = fit_null.objective - fit_full.objective;
    if gap < -GAP_TOL {
        return Err(Error::NonConvergence(format!(
            "restricted objective {} is below the full objective {}",
            fit_null.objective, fit_full.objective
        )));
    }
    Ok(k as f64 * gap.max(0.0))
}

/// `k (β̂ − β*)ᵀ ρ⁻¹ (β̂ − β*)` with `ρ = H J⁻¹ Hᵀ` evaluated at θ̂.
pub fn wald_statistic(beta_hat: &[f64], beta_star: &[f64], rho: &DMatrix<f64>, k: usize) -> Result<f64> {
    let c = beta_hat.len();
    if beta_star.len() != c || rho.nrows() != c || rho.ncols() != c {
        return Err(Error::DimensionMismatch {
            expected: c,
            got: rho.nrows(),
        });
    }
    let diff = DVector::from_fn(c, |i, _| beta_hat[i] - beta_star[i]);
    let sol = rho
        .clone()
        .cholesky()
        .map(|ch| ch.solve(&diff))
        .ok_or_else(|| Error::Singular("H J⁻¹ Hᵀ is singular".into()))?;
    Ok((k as f64 * diff.dot(&sol)).max(0.0))
}

/// Whether the null values pin part of a coupled constraint group at its
/// cap while leaving other members of the group free.
fn coupling_warnings(problem: &WlsProblem, spec: &TestSpec) -> Vec<String> {
    let mut out = Vec::new();
    for (idx, cap) in &problem.space.groups {
        if idx.len() < 2 {
            continue;
        }
        let pinned: Vec<(usize, f64)> = spec
            .tested
            .iter()
            .zip(&spec.beta_star)
            .filter(|(i, _)| idx.contains(i))
            .map(|(&i, &v)| (i, v))
            .collect();
        if pinned.is_empty() || pinned.len() == idx.len() {
            continue;
        }
        let sum: f64 = pinned.iter().map(|p| p.1).sum();
        if sum >= cap - 1e-9 {
            out.push(format!(
                "null values make the constraint on coordinates {idx:?} tight; the cone may not be a product set"
            ));
        }
    }
    out
}

/// Fits the full and restricted models, computes the statistic and
/// simulates its limit distribution at the full-model estimate.
pub fn run_test(problem: &WlsProblem, spec: &TestSpec, opts: &FitOptions) -> Result<TestResult> {
    let mut out = run_tests(problem, spec, &[spec.kind], opts)?;
    Ok(out.remove(0))
}

/// Limit ingredients at `theta`. When `L̇` is singular there (typically a
/// max-linear tie sitting exactly on a grid point), one-sided derivatives
/// just off `theta` are used, moving first toward the restricted estimate
/// and then toward the centre of the search box.
fn limit_near(
    problem: &WlsProblem,
    theta: &[f64],
    restricted: &[f64],
    cone: &Cone,
    warnings: &mut Vec<String>,
) -> Result<LimitSpec> {
    let first = match problem.limit_spec(theta, cone) {
        Err(Error::Singular(why)) => why,
        other => return other,
    };
    let space = &problem.space;
    let centre: Vec<f64> = (0..theta.len())
        .map(|i| 0.5 * (space.search_lower[i] + space.search_upper[i]))
        .collect();
    for (target, name) in [
        (restricted, "the restricted estimate"),
        (&centre[..], "the centre of the search box"),
    ] {
        for eps in [1e-6, 1e-4, 1e-2] {
            let moved: Vec<f64> = theta.iter().zip(target).map(|(a, b)| a + eps * (b - a)).collect();
            if let Ok(limit) = problem.limit_spec(&moved, cone) {
                warnings.push(format!(
                    "{first} at the estimate; limit law taken a fraction {eps:e} of the way to {name}"
                ));
                return Ok(limit);
            }
        }
    }
    Err(Error::Singular(first))
}

/// As [`run_test`] for several statistics at once. Both statistics share
/// one limit law, so a single simulated sample serves all of them; the
/// kind stored in `spec` is ignored.
pub fn run_tests(
    problem: &WlsProblem,
    spec: &TestSpec,
    kinds: &[StatisticKind],
    opts: &FitOptions,
) -> Result<Vec<TestResult>> {
    spec.validate()?;
    let p = problem.model.p();
    if let Some(&i) = spec.tested.iter().find(|&&i| i >= p) {
        return Err(Error::invalid(format!(
            "tested coordinate {i} out of range for p = {p}"
        )));
    }
    let cone = Cone::for_null(&problem.space, &spec.tested, &spec.beta_star)?;
    let warnings = coupling_warnings(problem, spec);
    let k = problem.k();
    let quiet = FitOptions {
        limit: false,
        ..opts.clone()
    };

    let fixed: Vec<(usize, f64)> = spec
        .tested
        .iter()
        .cloned()
        .zip(spec.beta_star.iter().cloned())
        .collect();
    let fit_null = problem.fit_restricted(&fixed, &quiet)?;
    let mut fit_full = problem.fit(&FitOptions {
        hint: Some(opts.hint.clone().unwrap_or_else(|| fit_null.theta_hat.clone())),
        ..quiet.clone()
    })?;
    if fit_full.objective > fit_null.objective + GAP_TOL {
        let again = problem.fit(&FitOptions {
            hint: Some(fit_null.theta_hat.clone()),
            seed: opts.seed.wrapping_add(1),
            ..quiet.clone()
        })?;
        if again.objective < fit_full.objective {
            fit_full = again;
        }
    }
    // The null minimizer attaining the full minimum is preferred among the
    // minimizers; over-fitted max-linear models otherwise land anywhere on
    // a flat ridge where L̇ is singular.
    if fit_null.objective <= fit_full.objective + GAP_TOL.max(1e-9 * fit_full.objective) {
        fit_full = FitResult {
            objective: fit_full.objective.min(fit_null.objective),
            fixed: Vec::new(),
            ..fit_null.clone()
        };
    } else {
        fit_full.theta_hat = problem
            .model
            .align_factors(&fit_full.theta_hat, Some(&fit_null.theta_hat), &[]);
    }

    let mut warnings = warnings;
    let limit = match &spec.limit_at {
        Some(theta) => {
            if theta.len() != p {
                return Err(Error::DimensionMismatch {
                    expected: p,
                    got: theta.len(),
                });
            }
            problem.limit_spec(theta, &cone)?
        }
        None => limit_near(problem, &fit_full.theta_hat, &fit_null.theta_hat, &cone, &mut warnings)?,
    };
    let sample: LimitSample = sample_limit(&limit, spec.n_draws, spec.seed)?;
    let critical_value = sample.critical_value(spec.level);
    let beta_hat: Vec<f64> = spec.tested.iter().map(|&i| fit_full.theta_hat[i]).collect();
    kinds
        .iter()
        .map(|&kind| {
            let statistic = match kind {
                StatisticKind::Deviance => deviance_statistic(&fit_full, &fit_null, k)?,
                StatisticKind::Wald => wald_statistic(&beta_hat, &spec.beta_star, &limit.rho()?, k)?,
            };
            Ok(TestResult {
                statistic,
                kind,
                critical_value,
                p_value: sample.p_value(statistic),
                level: spec.level,
                reject: statistic > critical_value,
                n_draws: spec.n_draws,
                seed: spec.seed,
                theta_hat: fit_full.theta_hat.clone(),
                theta_hat_null: fit_null.theta_hat.clone(),
                cone: cone.clone(),
                warnings: warnings.clone(),
                fit_full: fit_full.clone(),
                fit_null: fit_null.clone(),
            })
        })
        .collect()
}
