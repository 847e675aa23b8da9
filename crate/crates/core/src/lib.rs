//! Parametric tail dependence estimation and boundary hypothesis tests.
//!
//! The crate fits parametric stable tail dependence functions ℓ(·; θ) to
//! rank-based nonparametric estimates by weighted least squares, derives the
//! limit law of the estimator when parameters sit on the boundary of the
//! parameter space, and runs deviance and Wald tests whose critical values are
//! simulated from that limit law.
//!
//! Module map:
//!
//! - [`data`]: CSV ingestion, ranks and margin transforms.
//! - [`gpd`]: generalized Pareto margins for threshold exceedances.
//! - [`empirical`]: empirical and beta tail dependence function estimators.
//! - [`models`]: logistic, Brown–Resnick, max-linear and Marshall–Olkin families.
//! - [`wls`]: the weighted least squares estimator.
//! - [`limit`]: covariance of the estimator, cone projections and limit sampling.
//! - [`testing`]: deviance and Wald statistics with simulated critical values.
//! - [`sim`]: samplers and the Monte Carlo experiment harness.
//! - [`stocks`]: the bivariate financial returns pipeline.

pub mod data;
pub mod empirical;
pub mod error;
pub mod gpd;
pub mod limit;
pub mod models;
pub mod optim;
pub mod sim;
pub mod special;
pub mod stocks;
pub mod testing;
pub mod wls;

pub use data::{DataMatrix, RankMatrix, Transform};
pub use empirical::{EstimatorKind, EvalGrid, StdfEstimate};
pub use error::{Error, Result};
pub use gpd::GpdFit;
pub use limit::{Cone, ConeProjection, ConeTag, LimitSpec};
pub use models::{Family, ModelSpec, ParamSpace};
pub use testing::{StatisticKind, TestResult, TestSpec};
pub use wls::{FitOptions, FitResult, Weight, WlsProblem};
