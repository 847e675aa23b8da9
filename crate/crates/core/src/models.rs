//! Parametric stable tail dependence functions, their one-sided derivatives
//! and parameter spaces.
//!
//! Parameter vectors are flat. Coordinate orders per family:
//!
//! - logistic: `(θ)`.
//! - Brown–Resnick: `(ρ, α)`.
//! - max-linear: the columns of `B` other than `dropped_column` (default the
//!   last one), stacked column by column: `(b_11, …, b_d1, b_12, …)`. The
//!   dropped column is `1 − Σ` of the others in each row.
//! - Marshall–Olkin: shock weights `(w_1, …, w_{T−1})` of the first `T − 1`
//!   subsets; `w_T = 1 − Σ w_t`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::empirical::EvalGrid;
use crate::error::{Error, Result};
use crate::limit::{Cone, ConeTag};
use crate::optim::Feasible;
use crate::special::{mvn_cdf, norm_cdf, norm_pdf};

const TIE_TOL: f64 = 1e-12;
const THETA_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Logistic,
    BrownResnick,
    MaxLinear,
    MarshallOlkin,
}

impl std::fmt::Display for Family {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Family::Logistic => "logistic",
            Family::BrownResnick => "brown_resnick",
            Family::MaxLinear => "max_linear",
            Family::MarshallOlkin => "marshall_olkin",
        })
    }
}

/// On-disk form of a model specification.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    family: Family,
    d: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    r: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    locations: Option<Vec<[f64; 2]>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    subsets: Option<Vec<Vec<usize>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    dropped_column: Option<usize>,
}

/// A parametric family together with its fixed structural data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ModelFile", into = "ModelFile")]
pub struct ModelSpec {
    family: Family,
    d: usize,
    r: usize,
    dropped: usize,
    locations: Vec<[f64; 2]>,
    subsets: Vec<Vec<usize>>,
}

impl TryFrom<ModelFile> for ModelSpec {
    type Error = Error;

    fn try_from(m: ModelFile) -> Result<Self> {
        let spec = match m.family {
            Family::Logistic => ModelSpec::logistic(m.d)?,
            Family::BrownResnick => {
                let locs = m
                    .locations
                    .ok_or_else(|| Error::invalid("brown_resnick needs `locations`"))?;
                if locs.len() != m.d {
                    return Err(Error::DimensionMismatch {
                        expected: m.d,
                        got: locs.len(),
                    });
                }
                ModelSpec::brown_resnick(locs)?
            }
            Family::MaxLinear => {
                let r = m.r.ok_or_else(|| Error::invalid("max_linear needs `r`"))?;
                ModelSpec::max_linear(m.d, r)?.with_dropped_column(m.dropped_column.unwrap_or(r - 1))?
            }
            Family::MarshallOlkin => {
                let subsets = m
                    .subsets
                    .ok_or_else(|| Error::invalid("marshall_olkin needs `subsets`"))?;
                ModelSpec::marshall_olkin(m.d, subsets)?
            }
        };
        Ok(spec)
    }
}

impl From<ModelSpec> for ModelFile {
    fn from(s: ModelSpec) -> Self {
        ModelFile {
            family: s.family,
            d: s.d,
            r: (s.family == Family::MaxLinear).then_some(s.r),
            locations: (s.family == Family::BrownResnick).then(|| s.locations.clone()),
            subsets: (s.family == Family::MarshallOlkin).then(|| s.subsets.clone()),
            dropped_column: (s.family == Family::MaxLinear && s.dropped != s.r - 1).then_some(s.dropped),
        }
    }
}

impl ModelSpec {
    pub fn logistic(d: usize) -> Result<Self> {
        check_dim(d)?;
        Ok(Self {
            family: Family::Logistic,
            d,
            r: 0,
            dropped: 0,
            locations: Vec::new(),
            subsets: Vec::new(),
        })
    }

    pub fn brown_resnick(locations: Vec<[f64; 2]>) -> Result<Self> {
        check_dim(locations.len())?;
        for (a, la) in locations.iter().enumerate() {
            if la.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid(format!("location {a} is not finite")));
            }
            for (b, lb) in locations.iter().enumerate().skip(a + 1) {
                if la == lb {
                    return Err(Error::invalid(format!("locations {a} and {b} coincide")));
                }
            }
        }
        Ok(Self {
            family: Family::BrownResnick,
            d: locations.len(),
            r: 0,
            dropped: 0,
            locations,
            subsets: Vec::new(),
        })
    }

    /// Max-linear model with `r` factors; the last column of `B` is implied.
    pub fn max_linear(d: usize, r: usize) -> Result<Self> {
        check_dim(d)?;
        if r == 0 {
            return Err(Error::invalid("max_linear needs r >= 1"));
        }
        Ok(Self {
            family: Family::MaxLinear,
            d,
            r,
            dropped: r - 1,
            locations: Vec::new(),
            subsets: Vec::new(),
        })
    }

    /// Chooses which column of `B` is implied by the row sums. Hypotheses on
    /// a column are only expressible when that column is not the dropped one.
    pub fn with_dropped_column(mut self, column: usize) -> Result<Self> {
        if self.family != Family::MaxLinear {
            return Err(Error::invalid("dropped_column only applies to max_linear"));
        }
        if column >= self.r {
            return Err(Error::invalid(format!(
                "dropped_column {column} out of range for r = {}",
                self.r
            )));
        }
        self.dropped = column;
        Ok(self)
    }

    /// Marshall–Olkin model with shock subsets `J_t` (0-based indices).
    pub fn marshall_olkin(d: usize, subsets: Vec<Vec<usize>>) -> Result<Self> {
        check_dim(d)?;
        if subsets.len() < 2 {
            return Err(Error::invalid("marshall_olkin needs at least two subsets"));
        }
        let mut normalized = Vec::with_capacity(subsets.len());
        for (t, s) in subsets.iter().enumerate() {
            let mut s = s.clone();
            s.sort_unstable();
            s.dedup();
            if s.is_empty() || s.iter().any(|&j| j >= d) {
                return Err(Error::invalid(format!("subset {t} is empty or out of range")));
            }
            if normalized.contains(&s) {
                return Err(Error::invalid(format!("subset {t} is repeated")));
            }
            normalized.push(s);
        }
        for j in 0..d {
            if !normalized.iter().any(|s| s.contains(&j)) {
                return Err(Error::invalid(format!("component {j} is in no subset")));
            }
        }
        Ok(Self {
            family: Family::MarshallOlkin,
            d,
            r: normalized.len(),
            dropped: normalized.len() - 1,
            locations: Vec::new(),
            subsets: normalized,
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn family(&self) -> Family {
        self.family
    }

    pub fn d(&self) -> usize {
        self.d
    }

    /// Number of factors (max-linear) or subsets (Marshall–Olkin).
    pub fn r(&self) -> usize {
        self.r
    }

    pub fn dropped_column(&self) -> usize {
        self.dropped
    }

    pub fn locations(&self) -> &[[f64; 2]] {
        &self.locations
    }

    pub fn subsets(&self) -> &[Vec<usize>] {
        &self.subsets
    }

    /// Number of parameters.
    pub fn p(&self) -> usize {
        match self.family {
            Family::Logistic => 1,
            Family::BrownResnick => 2,
            Family::MaxLinear => self.d * (self.r - 1),
            Family::MarshallOlkin => self.r - 1,
        }
    }

    /// Column of `B` behind each free block position.
    fn free_columns(&self) -> Vec<usize> {
        (0..self.r).filter(|&t| t != self.dropped).collect()
    }

    /// Index of `b_jt` in the parameter vector, if `t` is a free column.
    pub fn maxlinear_index(&self, j: usize, t: usize) -> Option<usize> {
        if self.family != Family::MaxLinear || j >= self.d {
            return None;
        }
        let pos = self.free_columns().iter().position(|&c| c == t)?;
        Some(pos * self.d + j)
    }

    pub fn param_names(&self) -> Vec<String> {
        match self.family {
            Family::Logistic => vec!["theta".into()],
            Family::BrownResnick => vec!["rho".into(), "alpha".into()],
            Family::MaxLinear => self
                .free_columns()
                .iter()
                .flat_map(|&t| (0..self.d).map(move |j| format!("b{}{}", j + 1, t + 1)))
                .collect(),
            Family::MarshallOlkin => (1..self.r).map(|t| format!("w{t}")).collect(),
        }
    }

    pub fn space(&self) -> ParamSpace {
        let p = self.p();
        match self.family {
            Family::Logistic => ParamSpace::boxed(vec![1e-3], vec![1.0]),
            Family::BrownResnick => ParamSpace {
                lower: vec![1e-6, 1e-3],
                upper: vec![f64::INFINITY, 2.0],
                groups: Vec::new(),
                search_lower: vec![0.1, 0.01],
                search_upper: vec![10.0, 2.0],
            },
            Family::MaxLinear => {
                let groups = (0..self.d)
                    .map(|j| ((0..self.r - 1).map(|pos| pos * self.d + j).collect(), 1.0))
                    .collect();
                ParamSpace {
                    lower: vec![0.0; p],
                    upper: vec![1.0; p],
                    groups,
                    search_lower: vec![0.0; p],
                    search_upper: vec![1.0; p],
                }
            }
            Family::MarshallOlkin => ParamSpace {
                lower: vec![0.0; p],
                upper: vec![1.0; p],
                groups: vec![((0..p).collect(), 1.0)],
                search_lower: vec![0.0; p],
                search_upper: vec![1.0; p],
            },
        }
    }

    /// Evaluator of ℓ(·; θ) with the parameter-dependent work done once.
    pub fn at(&self, theta: &[f64]) -> Result<Stdf> {
        if theta.len() != self.p() {
            return Err(Error::DimensionMismatch {
                expected: self.p(),
                got: theta.len(),
            });
        }
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("parameter {theta:?}")));
        }
        let space = self.space();
        if !space.contains(theta, THETA_TOL) {
            return Err(Error::OutOfDomain(format!(
                "θ = {theta:?} lies outside the parameter space"
            )));
        }
        let kind = match self.family {
            Family::Logistic => StdfKind::Logistic { theta: theta[0] },
            Family::BrownResnick => {
                let (rho, alpha) = (theta[0], theta[1]);
                let d = self.d;
                let mut gamma = vec![0.0; d * d];
                for i in 0..d {
                    for j in 0..d {
                        if i != j {
                            let h = dist(self.locations[i], self.locations[j]);
                            gamma[i * d + j] = (h / rho).powf(alpha);
                        }
                    }
                }
                StdfKind::BrownResnick { gamma }
            }
            Family::MaxLinear | Family::MarshallOlkin => StdfKind::MaxLinear {
                b: self.b_matrix(theta)?,
            },
        };
        Ok(Stdf { d: self.d, kind })
    }

    /// Full `d × r` loading matrix of a max-linear or Marshall–Olkin model.
    pub fn b_matrix(&self, theta: &[f64]) -> Result<DMatrix<f64>> {
        match self.family {
            Family::MaxLinear => {
                let mut b = DMatrix::zeros(self.d, self.r);
                for (pos, &t) in self.free_columns().iter().enumerate() {
                    for j in 0..self.d {
                        b[(j, t)] = theta[pos * self.d + j].max(0.0);
                    }
                }
                for j in 0..self.d {
                    let s: f64 = b.row(j).sum();
                    b[(j, self.dropped)] = (1.0 - s).max(0.0);
                }
                Ok(b)
            }
            Family::MarshallOlkin => {
                let w = self.mo_weights(theta);
                let mut pj = vec![0.0; self.d];
                for (s, &wt) in self.subsets.iter().zip(&w) {
                    for &j in s {
                        pj[j] += wt;
                    }
                }
                if let Some(j) = pj.iter().position(|&v| v <= 0.0) {
                    return Err(Error::OutOfDomain(format!("component {j} receives no shock weight")));
                }
                let mut b = DMatrix::zeros(self.d, self.r);
                for (t, (s, &wt)) in self.subsets.iter().zip(&w).enumerate() {
                    for &j in s {
                        b[(j, t)] = wt / pj[j];
                    }
                }
                Ok(b)
            }
            _ => Err(Error::invalid(format!("{} has no loading matrix", self.family))),
        }
    }

    fn mo_weights(&self, theta: &[f64]) -> Vec<f64> {
        let mut w: Vec<f64> = theta.iter().map(|v| v.max(0.0)).collect();
        w.push((1.0 - theta.iter().sum::<f64>()).max(0.0));
        w
    }

    /// Parameter vector of a max-linear model with loading matrix `b`.
    pub fn theta_from_b(&self, b: &DMatrix<f64>) -> Result<Vec<f64>> {
        if self.family != Family::MaxLinear {
            return Err(Error::invalid("theta_from_b needs a max_linear model"));
        }
        if b.nrows() != self.d || b.ncols() != self.r {
            return Err(Error::DimensionMismatch {
                expected: self.d * self.r,
                got: b.len(),
            });
        }
        check_rows(b)?;
        Ok(self
            .free_columns()
            .iter()
            .flat_map(|&t| (0..self.d).map(move |j| b[(j, t)]))
            .collect())
    }

    /// Relabels the factors of a max-linear parameter vector. With a
    /// reference, picks the column permutation closest to it; otherwise
    /// orders columns by decreasing sum (ties lexicographically). Only
    /// permutations leaving the coordinates in `keep` unchanged are used.
    pub fn align_factors(&self, theta: &[f64], reference: Option<&[f64]>, keep: &[usize]) -> Vec<f64> {
        if self.family != Family::MaxLinear || self.r < 2 || self.r > 8 {
            return theta.to_vec();
        }
        let Ok(b) = self.b_matrix(theta) else {
            return theta.to_vec();
        };
        let target: Option<Vec<f64>> = match reference {
            Some(r) => Some(r.to_vec()),
            None => {
                let order = canonical_order(&b);
                let sorted = permute_columns(&b, &order);
                self.theta_from_b(&sorted).ok()
            }
        };
        let Some(target) = target else {
            return theta.to_vec();
        };
        let mut best = theta.to_vec();
        let mut best_dist = sq_dist(theta, &target);
        for perm in permutations(self.r) {
            let cand = match self.theta_from_b(&permute_columns(&b, &perm)) {
                Ok(c) => c,
                Err(_) => continue,
            };
            if keep.iter().any(|&i| (cand[i] - theta[i]).abs() > 1e-12) {
                continue;
            }
            let dd = sq_dist(&cand, &target);
            if dd < best_dist - 1e-15 {
                best = cand;
                best_dist = dd;
            }
        }
        best
    }

    /// Checks that `x` is a valid evaluation point for this family.
    fn check_point(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.d {
            return Err(Error::DimensionMismatch {
                expected: self.d,
                got: x.len(),
            });
        }
        if x.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::OutOfDomain(format!("{x:?} is not in [0, inf)^d")));
        }
        if self.family == Family::BrownResnick && x.iter().filter(|&&v| v > 0.0).count() > 2 {
            return Err(Error::Unsupported(
                "Brown–Resnick evaluation needs at most two nonzero coordinates".into(),
            ));
        }
        Ok(())
    }

    /// Checks that every grid point is valid for this family.
    pub fn check_grid(&self, grid: &EvalGrid) -> Result<()> {
        grid.points().iter().try_for_each(|p| self.check_point(p))
    }
}

fn check_dim(d: usize) -> Result<()> {
    if d < 2 {
        return Err(Error::invalid(format!("dimension d = {d} must be at least 2")));
    }
    Ok(())
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

pub(crate) fn check_rows(b: &DMatrix<f64>) -> Result<()> {
    for j in 0..b.nrows() {
        if b.row(j).iter().any(|&v| v < -1e-9 || !v.is_finite()) {
            return Err(Error::invalid(format!("row {j} of B has a negative entry")));
        }
        let s = b.row(j).sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("row {j} of B sums to {s}, not 1")));
        }
    }
    Ok(())
}

fn permute_columns(b: &DMatrix<f64>, order: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(b.nrows(), b.ncols(), |j, t| b[(j, order[t])])
}

/// Column order by decreasing sum, ties broken by decreasing lexicographic
/// order of the entries.
fn canonical_order(b: &DMatrix<f64>) -> Vec<usize> {
    let mut order: Vec<usize> = (0..b.ncols()).collect();
    order.sort_by(|&s, &t| {
        let (cs, ct) = (b.column(s).sum(), b.column(t).sum());
        if (cs - ct).abs() > 1e-12 {
            return ct.total_cmp(&cs);
        }
        for j in 0..b.nrows() {
            let o = b[(j, t)].total_cmp(&b[(j, s)]);
            if o.is_ne() {
                return o;
            }
        }
        std::cmp::Ordering::Equal
    });
    order
}

fn permutations(r: usize) -> Vec<Vec<usize>> {
    fn rec(prefix: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
        if prefix.len() == used.len() {
            out.push(prefix.clone());
            return;
        }
        for i in 0..used.len() {
            if !used[i] {
                used[i] = true;
                prefix.push(i);
                rec(prefix, used, out);
                prefix.pop();
                used[i] = false;
            }
        }
    }
    let mut out = Vec::new();
    rec(&mut Vec::new(), &mut vec![false; r], &mut out);
    out
}

/// Sorts the columns of `b` by decreasing sum (ties: lexicographically
/// larger column first), drops the last column and stacks the rest.
pub fn canonicalize_maxlinear(b: &DMatrix<f64>) -> Result<Vec<f64>> {
    if b.ncols() == 0 || b.nrows() == 0 {
        return Err(Error::invalid("empty loading matrix"));
    }
    check_rows(b)?;
    let sorted = permute_columns(b, &canonical_order(b));
    Ok((0..b.ncols() - 1)
        .flat_map(|t| sorted.column(t).iter().cloned().collect::<Vec<_>>())
        .collect())
}

/// Box bounds, disjoint group caps `Σ_{i∈G} θ_i ≤ cap`, and a finite search
/// box used to draw starting values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSpace {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub groups: Vec<(Vec<usize>, f64)>,
    pub search_lower: Vec<f64>,
    pub search_upper: Vec<f64>,
}

impl ParamSpace {
    pub fn boxed(lower: Vec<f64>, upper: Vec<f64>) -> Self {
        Self {
            search_lower: lower.clone(),
            search_upper: upper.clone(),
            lower,
            upper,
            groups: Vec::new(),
        }
    }

    pub fn p(&self) -> usize {
        self.lower.len()
    }

    pub fn contains(&self, theta: &[f64], tol: f64) -> bool {
        self.feasible().contains(theta, tol)
    }

    pub fn feasible(&self) -> Feasible {
        Feasible {
            lower: self.lower.clone(),
            upper: self.upper.clone(),
            groups: self.groups.clone(),
        }
    }

    pub fn at_lower(&self, theta: &[f64], i: usize) -> bool {
        theta[i] <= self.lower[i] + THETA_TOL
    }

    pub fn at_upper(&self, theta: &[f64], i: usize) -> bool {
        theta[i] >= self.upper[i] - THETA_TOL
    }

    /// Coordinate `i` cannot increase: upper bound or an active group cap.
    pub fn blocked_up(&self, theta: &[f64], i: usize) -> bool {
        self.at_upper(theta, i) || self.feasible().group_active(theta, i, THETA_TOL)
    }

    pub fn on_boundary(&self, theta: &[f64], i: usize) -> bool {
        self.at_lower(theta, i) || self.blocked_up(theta, i)
    }
}

#[derive(Debug, Clone)]
enum StdfKind {
    Logistic {
        theta: f64,
    },
    /// Semivariogram values `γ(s_i − s_j)`, row-major `d × d`.
    BrownResnick {
        gamma: Vec<f64>,
    },
    MaxLinear {
        b: DMatrix<f64>,
    },
}

/// ℓ(·; θ) at a fixed parameter.
#[derive(Debug, Clone)]
pub struct Stdf {
    d: usize,
    kind: StdfKind,
}

impl Stdf {
    pub fn d(&self) -> usize {
        self.d
    }

    /// Loading matrix for max-linear type models.
    pub fn loadings(&self) -> Option<&DMatrix<f64>> {
        match &self.kind {
            StdfKind::MaxLinear { b } => Some(b),
            _ => None,
        }
    }

    /// ℓ(x). Brown–Resnick accepts at most two nonzero coordinates.
    pub fn value(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.d {
            return Err(Error::DimensionMismatch {
                expected: self.d,
                got: x.len(),
            });
        }
        if x.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::OutOfDomain(format!("{x:?} is not in [0, inf)^d")));
        }
        if let StdfKind::BrownResnick { .. } = self.kind {
            if x.iter().filter(|&&v| v > 0.0).count() > 2 {
                return Err(Error::Unsupported(
                    "Brown–Resnick evaluation needs at most two nonzero coordinates".into(),
                ));
            }
        }
        Ok(self.value_unchecked(x))
    }

    /// ℓ(x) without argument checks. Brown–Resnick points with three or four
    /// nonzero coordinates go through the multivariate normal formula.
    pub(crate) fn value_unchecked(&self, x: &[f64]) -> f64 {
        match &self.kind {
            StdfKind::Logistic { theta } => logistic(*theta, x),
            StdfKind::BrownResnick { gamma } => {
                let nz: Vec<usize> = (0..self.d).filter(|&j| x[j] > 0.0).collect();
                match nz.len() {
                    0 => 0.0,
                    1 => x[nz[0]],
                    2 => {
                        let (i, j) = (nz[0], nz[1]);
                        hr_pair(x[i], x[j], (2.0 * gamma[i * self.d + j]).sqrt())
                    }
                    _ => hr_general(gamma, self.d, x, &nz),
                }
            }
            StdfKind::MaxLinear { b } => (0..b.ncols())
                .map(|t| (0..self.d).map(|j| b[(j, t)] * x[j]).fold(0.0, f64::max))
                .sum(),
        }
    }

    /// Partial derivatives `∂ℓ/∂x_j`. At non-differentiable points of the
    /// max-linear family the derivative of a column maximum is shared
    /// equally among the tied maximizers; at `x_j = 0` the right derivative
    /// is used.
    pub fn x_partials(&self, x: &[f64]) -> Vec<f64> {
        let d = self.d;
        match &self.kind {
            StdfKind::Logistic { theta } => {
                let l = logistic(*theta, x);
                if l == 0.0 {
                    return vec![if *theta == 1.0 { 1.0 } else { 0.0 }; d];
                }
                x.iter().map(|&xj| (xj / l).powf(1.0 / theta - 1.0)).collect()
            }
            StdfKind::BrownResnick { gamma } => {
                let nz: Vec<usize> = (0..d).filter(|&j| x[j] > 0.0).collect();
                let mut g = vec![0.0; d];
                match nz.len() {
                    0 => {}
                    1 => g[nz[0]] = 1.0,
                    2 => {
                        let (i, j) = (nz[0], nz[1]);
                        let a = (2.0 * gamma[i * d + j]).sqrt();
                        if a == 0.0 {
                            let m = if x[i] > x[j] { i } else { j };
                            if x[i] == x[j] {
                                g[i] = 0.5;
                                g[j] = 0.5;
                            } else {
                                g[m] = 1.0;
                            }
                        } else {
                            let lr = (x[i] / x[j]).ln();
                            g[i] = norm_cdf(a / 2.0 + lr / a);
                            g[j] = norm_cdf(a / 2.0 - lr / a);
                        }
                    }
                    _ => {
                        for &j in &nz {
                            let h = 1e-6 * x[j];
                            let mut up = x.to_vec();
                            let mut dn = x.to_vec();
                            up[j] += h;
                            dn[j] -= h;
                            g[j] = (hr_general(gamma, d, &up, &nz) - hr_general(gamma, d, &dn, &nz)) / (2.0 * h);
                        }
                    }
                }
                g
            }
            StdfKind::MaxLinear { b } => {
                let mut g = vec![0.0; d];
                for t in 0..b.ncols() {
                    let vals: Vec<f64> = (0..d).map(|j| b[(j, t)] * x[j]).collect();
                    let m = vals.iter().cloned().fold(0.0, f64::max);
                    if m > 0.0 {
                        let tied: Vec<usize> = (0..d).filter(|&j| vals[j] >= m * (1.0 - TIE_TOL)).collect();
                        for &j in &tied {
                            g[j] += b[(j, t)] / tied.len() as f64;
                        }
                    } else {
                        for j in 0..d {
                            if x[j] == 0.0 {
                                g[j] += b[(j, t)];
                            }
                        }
                    }
                }
                g
            }
        }
    }
}

/// `(Σ x_j^{1/θ})^θ`, scaled by the maximum to avoid overflow.
fn logistic(theta: f64, x: &[f64]) -> f64 {
    let m = x.iter().cloned().fold(0.0, f64::max);
    if m == 0.0 {
        return 0.0;
    }
    let s: f64 = x.iter().map(|&v| (v / m).powf(1.0 / theta)).sum();
    m * s.powf(theta)
}

/// Hüsler–Reiss pairwise value with `a = √(2γ)`.
fn hr_pair(x1: f64, x2: f64, a: f64) -> f64 {
    if a == 0.0 {
        return x1.max(x2);
    }
    if a.is_infinite() {
        return x1 + x2;
    }
    let lr = (x1 / x2).ln();
    x1 * norm_cdf(a / 2.0 + lr / a) + x2 * norm_cdf(a / 2.0 - lr / a)
}

/// `Σ_j x_j Φ_{m−1}(η^{(j)}; Υ^{(j)})` over the nonzero coordinates `nz`,
/// `η_i = log(x_j/x_i) + γ_ij`, `Υ_ik = γ_ij + γ_kj − γ_ik`.
fn hr_general(gamma: &[f64], d: usize, x: &[f64], nz: &[usize]) -> f64 {
    let g = |i: usize, k: usize| gamma[i * d + k];
    nz.iter()
        .map(|&j| {
            let others: Vec<usize> = nz.iter().cloned().filter(|&i| i != j).collect();
            let eta: Vec<f64> = others.iter().map(|&i| (x[j] / x[i]).ln() + g(i, j)).collect();
            let ups: Vec<Vec<f64>> = others
                .iter()
                .map(|&i| {
                    others
                        .iter()
                        .map(|&k| g(i, j) + g(k, j) - if i == k { 0.0 } else { g(i, k) })
                        .collect()
                })
                .collect();
            x[j] * mvn_cdf(&eta, &ups)
        })
        .sum()
}

/// ℓ(x; θ).
pub fn stdf(model: &ModelSpec, theta: &[f64], x: &[f64]) -> Result<f64> {
    model.check_point(x)?;
    model.at(theta)?.value(x)
}

/// Which one-sided derivative was taken for each coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Right,
    Left,
    Central,
}

#[derive(Debug, Clone)]
pub struct Gradient {
    pub values: Vec<f64>,
    pub sides: Vec<Side>,
    /// Some coordinate sat at a point where left and right derivatives differ
    /// and was not forced by a bound.
    pub tie: bool,
}

/// Partial derivatives of ℓ(x; ·) at θ, one-sided into the feasible region
/// at boundary coordinates.
pub fn stdf_gradient(model: &ModelSpec, theta: &[f64], x: &[f64], space: &ParamSpace) -> Result<Vec<f64>> {
    model.check_point(x)?;
    let f = model.at(theta)?;
    Ok(gradient_at(model, &f, theta, x, space).values)
}

pub(crate) fn gradient_at(model: &ModelSpec, f: &Stdf, theta: &[f64], x: &[f64], space: &ParamSpace) -> Gradient {
    let p = theta.len();
    match (&f.kind, model.family) {
        (StdfKind::Logistic { theta: th }, _) => {
            let l = logistic(*th, x);
            let m = x.iter().cloned().fold(0.0, f64::max);
            let value = if m == 0.0 {
                0.0
            } else {
                let u: Vec<f64> = x.iter().map(|&v| v / m).collect();
                let su: f64 = u.iter().map(|&v| v.powf(1.0 / th)).sum();
                let wl: f64 = u
                    .iter()
                    .filter(|&&v| v > 0.0)
                    .map(|&v| v.powf(1.0 / th) * v.ln())
                    .sum::<f64>()
                    / su;
                l * (su.ln() - wl / th)
            };
            let side = if space.at_upper(theta, 0) {
                Side::Left
            } else {
                Side::Right
            };
            Gradient {
                values: vec![value],
                sides: vec![side],
                tie: false,
            }
        }
        (StdfKind::BrownResnick { gamma }, _) => {
            let nz: Vec<usize> = (0..f.d).filter(|&j| x[j] > 0.0).collect();
            let sides = vec![
                Side::Central,
                if space.at_upper(theta, 1) {
                    Side::Left
                } else {
                    Side::Right
                },
            ];
            if nz.len() < 2 {
                return Gradient {
                    values: vec![0.0; 2],
                    sides,
                    tie: false,
                };
            }
            let (i, j) = (nz[0], nz[1]);
            let (rho, alpha) = (theta[0], theta[1]);
            let g = gamma[i * f.d + j];
            let a = (2.0 * g).sqrt();
            if a == 0.0 || !a.is_finite() {
                return Gradient {
                    values: vec![0.0; 2],
                    sides,
                    tie: false,
                };
            }
            let lr = (x[i] / x[j]).ln();
            let dl_da = x[i] * norm_pdf(a / 2.0 + lr / a);
            let h = dist(model.locations[i], model.locations[j]);
            let da_drho = -0.5 * alpha * a / rho;
            let da_dalpha = 0.5 * a * (h / rho).ln();
            Gradient {
                values: vec![dl_da * da_drho, dl_da * da_dalpha],
                sides,
                tie: false,
            }
        }
        (StdfKind::MaxLinear { b }, Family::MaxLinear) => maxlinear_gradient(model, b, theta, x, space),
        (StdfKind::MaxLinear { .. }, _) => {
            let mut values = vec![0.0; p];
            let mut sides = vec![Side::Central; p];
            for i in 0..p {
                let h = 1e-6 * theta[i].abs().max(1.0);
                let up_ok = !space.blocked_up(theta, i);
                let dn_ok = !space.at_lower(theta, i);
                let eval = |delta: f64| -> Option<f64> {
                    let mut t = theta.to_vec();
                    t[i] += delta;
                    model.at(&t).ok().map(|s| s.value_unchecked(x))
                };
                let base = f.value_unchecked(x);
                let (v, s) = match (up_ok, dn_ok) {
                    (true, true) => match (eval(h), eval(-h)) {
                        (Some(u), Some(dn)) => ((u - dn) / (2.0 * h), Side::Central),
                        (Some(u), None) => ((u - base) / h, Side::Right),
                        (None, Some(dn)) => ((base - dn) / h, Side::Left),
                        _ => (0.0, Side::Central),
                    },
                    (true, false) => (eval(h).map_or(0.0, |u| (u - base) / h), Side::Right),
                    (false, true) => (eval(-h).map_or(0.0, |dn| (base - dn) / h), Side::Left),
                    (false, false) => (0.0, Side::Central),
                };
                values[i] = v;
                sides[i] = s;
            }
            Gradient {
                values,
                sides,
                tie: false,
            }
        }
    }
}

/// Column maximizers of `b_jt x_j`, with a uniqueness flag.
fn argmax_column(b: &DMatrix<f64>, x: &[f64], t: usize) -> (Vec<usize>, f64) {
    let vals: Vec<f64> = (0..b.nrows()).map(|j| b[(j, t)] * x[j]).collect();
    let m = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let tol = TIE_TOL * m.abs().max(1e-300);
    ((0..b.nrows()).filter(|&j| vals[j] >= m - tol).collect(), m)
}

fn maxlinear_gradient(model: &ModelSpec, b: &DMatrix<f64>, theta: &[f64], x: &[f64], space: &ParamSpace) -> Gradient {
    let d = model.d;
    let p = theta.len();
    let (drop_arg, _) = argmax_column(b, x, model.dropped);
    let mut values = vec![0.0; p];
    let mut sides = vec![Side::Right; p];
    let mut tie = false;
    for (pos, &t) in model.free_columns().iter().enumerate() {
        let (arg, _) = argmax_column(b, x, t);
        for j in 0..d {
            let i = pos * d + j;
            let in_t = arg.contains(&j);
            let unique_t = in_t && arg.len() == 1;
            let in_drop = drop_arg.contains(&j);
            let unique_drop = in_drop && drop_arg.len() == 1;
            let xj = x[j];
            let right = xj * (f64::from(u8::from(in_t)) - f64::from(u8::from(unique_drop)));
            let left = xj * (f64::from(u8::from(unique_t)) - f64::from(u8::from(in_drop)));
            let (v, s) = if space.at_lower(theta, i) {
                (right, Side::Right)
            } else if space.blocked_up(theta, i) {
                (left, Side::Left)
            } else {
                if (right - left).abs() > 0.0 {
                    tie = true;
                }
                (right, Side::Right)
            };
            values[i] = v;
            sides[i] = s;
        }
    }
    Gradient { values, sides, tie }
}

/// `L(θ) = (ℓ(c_1; θ), …, ℓ(c_q; θ))`.
pub fn build_l(model: &ModelSpec, theta: &[f64], grid: &EvalGrid) -> Result<Vec<f64>> {
    model.check_grid(grid)?;
    let f = model.at(theta)?;
    Ok(grid.points().iter().map(|c| f.value_unchecked(c)).collect())
}

#[derive(Debug, Clone)]
pub struct Ldot {
    /// `q × p` matrix of one-sided partial derivatives.
    pub matrix: DMatrix<f64>,
    pub smallest_singular_value: f64,
    /// Any entry was taken at a max-linear tie away from the bounds.
    pub tie: bool,
}

impl Ldot {
    pub fn rank_deficient(&self) -> bool {
        self.smallest_singular_value < 1e-10
    }
}

/// `L̇(θ)`, stacked in grid order, with a rank diagnostic.
pub fn build_ldot(model: &ModelSpec, theta: &[f64], grid: &EvalGrid) -> Result<Ldot> {
    model.check_grid(grid)?;
    let f = model.at(theta)?;
    let space = model.space();
    Ok(ldot_at(model, &f, theta, grid, &space))
}

pub(crate) fn ldot_at(model: &ModelSpec, f: &Stdf, theta: &[f64], grid: &EvalGrid, space: &ParamSpace) -> Ldot {
    let p = theta.len();
    let q = grid.q();
    let mut matrix = DMatrix::zeros(q, p);
    let mut tie = false;
    for (m, c) in grid.points().iter().enumerate() {
        let g = gradient_at(model, f, theta, c, space);
        tie |= g.tie;
        for (i, v) in g.values.iter().enumerate() {
            matrix[(m, i)] = *v;
        }
    }
    let gram = matrix.transpose() * &matrix;
    let smallest = gram
        .symmetric_eigenvalues()
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
        .max(0.0)
        .sqrt();
    Ldot {
        matrix,
        smallest_singular_value: smallest,
        tie,
    }
}

/// Tags each tested coordinate by where `θ0` sits: lower bound → nonneg,
/// upper bound → nonpos, interior → free. Untested coordinates must be
/// interior.
pub fn local_cone(model: &ModelSpec, theta0: &[f64], tested: &[usize]) -> Result<Cone> {
    let space = model.space();
    if theta0.len() != space.p() {
        return Err(Error::DimensionMismatch {
            expected: space.p(),
            got: theta0.len(),
        });
    }
    if !space.contains(theta0, THETA_TOL) {
        return Err(Error::OutOfDomain(format!("θ0 = {theta0:?} is infeasible")));
    }
    for i in 0..space.p() {
        if !tested.contains(&i) && space.on_boundary(theta0, i) {
            return Err(Error::invalid(format!(
                "untested coordinate {i} ({}) lies on the boundary",
                model.param_names()[i]
            )));
        }
    }
    let tags = tested
        .iter()
        .map(|&i| {
            if i >= space.p() {
                Err(Error::invalid(format!("coordinate {i} out of range")))
            } else if space.at_lower(theta0, i) {
                Ok(ConeTag::Nonneg)
            } else if space.blocked_up(theta0, i) {
                Ok(ConeTag::Nonpos)
            } else {
                Ok(ConeTag::Free)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Cone::new(space.p(), tested.to_vec(), tags)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ml(d: usize, r: usize) -> ModelSpec {
        ModelSpec::max_linear(d, r).unwrap()
    }

    #[test]
    fn hand_values() {
        let lg = ModelSpec::logistic(3).unwrap();
        assert!((stdf(&lg, &[1.0], &[0.3, 1.2, 2.0]).unwrap() - 3.5).abs() < 1e-12);
        assert!((stdf(&lg, &[0.5], &[1.0, 1.0, 0.0]).unwrap() - 2f64.sqrt()).abs() < 1e-12);
        let br = ModelSpec::brown_resnick(vec![[0.0, 0.0], [1.0, 0.0]]).unwrap();
        let v = stdf(&br, &[1.0, 2.0], &[1.0, 1.0]).unwrap();
        assert!((v - 1.520_499_877_813_046_6).abs() < 1e-9, "{v}");
        let m = ml(2, 4);
        let b = DMatrix::from_row_slice(2, 4, &[0.41, 0.14, 0.43, 0.02, 0.43, 0.44, 0.13, 0.0]);
        let theta = m.theta_from_b(&b).unwrap();
        let v = stdf(&m, &theta, &[1.0, 1.0]).unwrap();
        assert!((v - (0.43 + 0.44 + 0.43 + 0.02)).abs() < 1e-12);
    }

    #[test]
    fn brown_resnick_three_points_rejected() {
        let br = ModelSpec::brown_resnick(vec![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]).unwrap();
        assert!(matches!(
            stdf(&br, &[1.0, 1.0], &[1.0, 1.0, 1.0]),
            Err(Error::Unsupported(_))
        ));
    }

    /// Smith model: Gaussian storm profiles, extremal coefficient for two
    /// sites at distance h with unit covariance scale is 2Φ(h/(2σ)) where
    /// the semivariogram equals h²/(2σ²)… written from the Mahalanobis form.
    fn smith_pair(x1: f64, x2: f64, h: f64, rho: f64) -> f64 {
        // Smith: a = Mahalanobis distance, γ = (h/ρ)^2 ⇒ a² = 2h²/ρ².
        let a = std::f64::consts::SQRT_2 * h / rho;
        let z = |u: f64, v: f64| a / 2.0 + (u / v).ln() / a;
        x1 * norm_cdf(z(x1, x2)) + x2 * norm_cdf(z(x2, x1))
    }

    #[test]
    fn brown_resnick_limits_and_smith() {
        let far = ModelSpec::brown_resnick(vec![[0.0, 0.0], [1e6, 0.0]]).unwrap();
        assert!((stdf(&far, &[1.0, 1.0], &[0.4, 0.9]).unwrap() - 1.3).abs() < 1e-9);
        let near = ModelSpec::brown_resnick(vec![[0.0, 0.0], [1e-9, 0.0]]).unwrap();
        assert!((stdf(&near, &[1.0, 1.0], &[0.4, 0.9]).unwrap() - 0.9).abs() < 1e-6);
        for &h in &[0.3, 1.0, 2.5] {
            let br = ModelSpec::brown_resnick(vec![[0.0, 0.0], [0.0, h]]).unwrap();
            for &rho in &[0.5, 1.0, 3.0] {
                let v = stdf(&br, &[rho, 2.0], &[0.7, 1.1]).unwrap();
                assert!((v - smith_pair(0.7, 1.1, h, rho)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn brown_resnick_general_formula_reduces_to_pairs() {
        let br = ModelSpec::brown_resnick(vec![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]).unwrap();
        let f = br.at(&[1.0, 1.5]).unwrap();
        // three-point value bounded by pairwise structure
        let x = [0.5, 1.0, 0.8];
        let v = f.value_unchecked(&x);
        let pair = f.value_unchecked(&[0.5, 1.0, 0.0]);
        assert!(v >= pair - 1e-6 && v <= pair + 0.8 + 1e-6);
        assert!(v >= 1.0 - 1e-6 && v <= 2.3 + 1e-6);
        // far-away third site decouples
        let br = ModelSpec::brown_resnick(vec![[0.0, 0.0], [1.0, 0.0], [500.0, 0.0]]).unwrap();
        let f = br.at(&[1.0, 1.5]).unwrap();
        let v = f.value_unchecked(&x);
        let pair = f.value_unchecked(&[0.5, 1.0, 0.0]);
        assert!((v - (pair + 0.8)).abs() < 1e-5, "{v} vs {}", pair + 0.8);
    }

    #[test]
    fn maxlinear_gradient_example() {
        let m = ml(2, 2);
        let sp = m.space();
        // b11 x1 > b21 x2 and (1-b11) x1 < (1-b21) x2
        let g = stdf_gradient(&m, &[0.6, 0.3], &[1.0, 1.0], &sp).unwrap();
        assert_eq!(g, vec![1.0, -1.0]);
        let g = stdf_gradient(&m, &[0.6, 0.3], &[0.5, 0.6], &sp).unwrap();
        assert_eq!(g, vec![0.5, -0.6]);
        // both maxima attained by the second coordinate: locally constant
        let g = stdf_gradient(&m, &[0.6, 0.3], &[0.5, 1.2], &sp).unwrap();
        assert_eq!(g, vec![0.0, 0.0]);
    }

    #[test]
    fn logistic_gradient_at_upper_bound() {
        let lg = ModelSpec::logistic(2).unwrap();
        let g = stdf_gradient(&lg, &[1.0], &[1.0, 1.0], &lg.space()).unwrap();
        assert!((g[0] - 2.0 * 2f64.ln()).abs() < 1e-12);
        let l = build_l(&lg, &[0.6], &EvalGrid::new(vec![vec![1.0, 1.0]]).unwrap()).unwrap();
        assert!((l[0] - 2f64.powf(0.6)).abs() < 1e-12);
    }

    fn numeric_gradient(model: &ModelSpec, theta: &[f64], x: &[f64]) -> Vec<f64> {
        (0..theta.len())
            .map(|i| {
                let h = 1e-6 * theta[i].abs().max(1.0);
                let mut up = theta.to_vec();
                let mut dn = theta.to_vec();
                up[i] += h;
                dn[i] -= h;
                (stdf(model, &up, x).unwrap() - stdf(model, &dn, x).unwrap()) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn analytic_gradients_match_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let lg = ModelSpec::logistic(3).unwrap();
        let br = ModelSpec::brown_resnick(vec![[0.0, 0.0], [1.0, 0.5], [2.0, 2.0]]).unwrap();
        let m = ml(3, 3);
        for _ in 0..200 {
            let x: Vec<f64> = (0..3).map(|_| rng.random_range(0.05..2.0)).collect();
            let th = [rng.random_range(0.1..0.95)];
            let a = stdf_gradient(&lg, &th, &x, &lg.space()).unwrap();
            let n = numeric_gradient(&lg, &th, &x);
            assert!((a[0] - n[0]).abs() <= 1e-5 * n[0].abs().max(1.0));

            let xp = [x[0], 0.0, x[2]];
            let th = [rng.random_range(0.3..4.0), rng.random_range(0.2..1.9)];
            let a = stdf_gradient(&br, &th, &xp, &br.space()).unwrap();
            let n = numeric_gradient(&br, &th, &xp);
            for i in 0..2 {
                assert!((a[i] - n[i]).abs() <= 1e-5 * n[i].abs().max(1.0), "{a:?} {n:?}");
            }

            let raw: Vec<f64> = (0..9).map(|_| rng.random_range(0.05..1.0)).collect();
            let b = DMatrix::from_fn(3, 3, |j, t| {
                raw[j * 3 + t] / (raw[j * 3] + raw[j * 3 + 1] + raw[j * 3 + 2])
            });
            let th = m.theta_from_b(&b).unwrap();
            let a = stdf_gradient(&m, &th, &x, &m.space()).unwrap();
            let n = numeric_gradient(&m, &th, &x);
            for i in 0..th.len() {
                assert!((a[i] - n[i]).abs() <= 1e-5 * n[i].abs().max(1.0));
            }
        }
    }

    #[test]
    fn ldot_oracle_on_pairwise_grid() {
        let m = ml(3, 2);
        let theta = [1.0, 0.7, 0.2];
        let mut pts = Vec::new();
        for &(a, b) in &[(0usize, 1usize), (0, 2), (1, 2)] {
            for &u in &[0.1, 0.5, 1.0] {
                for &v in &[0.2, 0.9] {
                    let mut p = vec![0.0; 3];
                    p[a] = u;
                    p[b] = v;
                    pts.push(p);
                }
            }
        }
        let grid = EvalGrid::new(pts.clone()).unwrap();
        let l = build_l(&m, &theta, &grid).unwrap();
        let ld = build_ldot(&m, &theta, &grid).unwrap();
        for (i, p) in pts.iter().enumerate() {
            assert_eq!(l[i], stdf(&m, &theta, p).unwrap());
            let g = stdf_gradient(&m, &theta, p, &m.space()).unwrap();
            for k in 0..3 {
                assert_eq!(ld.matrix[(i, k)], g[k]);
            }
        }
        assert!(!ld.rank_deficient());
        let unit = EvalGrid::new(vec![vec![1.0, 0.0, 0.0]]).unwrap();
        let ld = build_ldot(&m, &theta, &unit).unwrap();
        assert!(ld.matrix.iter().all(|v| *v == 0.0));
        assert!(ld.rank_deficient());
    }

    #[test]
    fn local_cones_of_paper_models() {
        let m1 = ml(3, 2);
        let c = local_cone(&m1, &[1.0, 0.7, 0.2], &[0]).unwrap();
        assert_eq!(c.tags(), &[ConeTag::Nonpos]);
        let c = local_cone(&m1, &[1.0, 0.7, 0.0], &[0, 2]).unwrap();
        assert_eq!(c.tags(), &[ConeTag::Nonpos, ConeTag::Nonneg]);
        let c = local_cone(&m1, &[0.5, 0.7, 0.2], &[]).unwrap();
        assert!(c.tags().is_empty());
        assert!(local_cone(&m1, &[1.0, 0.7, 0.0], &[0]).is_err());
        let m3 = ml(2, 3);
        let c = local_cone(&m3, &[0.0, 0.8, 0.6, 0.0], &[0, 3]).unwrap();
        assert_eq!(c.tags(), &[ConeTag::Nonneg, ConeTag::Nonneg]);
    }

    #[test]
    fn canonical_ordering() {
        let b = DMatrix::from_row_slice(2, 2, &[0.1, 0.9, 0.2, 0.8]);
        assert_eq!(canonicalize_maxlinear(&b).unwrap(), vec![0.9, 0.8]);
        let id = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(canonicalize_maxlinear(&id).unwrap(), vec![1.0, 0.0]);
        let sorted = DMatrix::from_row_slice(2, 2, &[0.9, 0.1, 0.8, 0.2]);
        assert_eq!(canonicalize_maxlinear(&sorted).unwrap(), vec![0.9, 0.8]);
        let bad = DMatrix::from_row_slice(2, 2, &[0.5, 0.6, 0.2, 0.8]);
        assert!(canonicalize_maxlinear(&bad).is_err());
    }

    #[test]
    fn factor_alignment() {
        let m = ml(3, 2);
        // swapped labels of (1, 0.7, 0.2)
        let swapped = [0.0, 0.3, 0.8];
        let aligned = m.align_factors(&swapped, Some(&[1.0, 0.7, 0.2]), &[]);
        for (a, b) in aligned.iter().zip([1.0, 0.7, 0.2]) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(
            m.align_factors(&swapped, Some(&[1.0, 0.7, 0.2]), &[1]),
            swapped.to_vec()
        );
        let m = ml(2, 3).with_dropped_column(0).unwrap();
        let b = DMatrix::from_row_slice(2, 3, &[0.2, 0.5, 0.3, 0.6, 0.1, 0.3]);
        let th = m.theta_from_b(&b).unwrap();
        assert_eq!(th, vec![0.5, 0.1, 0.3, 0.3]);
        assert!((m.b_matrix(&th).unwrap() - b).abs().max() < 1e-15);
    }

    #[test]
    fn marshall_olkin_equals_induced_maxlinear() {
        let mo = ModelSpec::marshall_olkin(2, vec![vec![0], vec![1], vec![0, 1]]).unwrap();
        let th = [0.2, 0.3];
        let b = mo.b_matrix(&th).unwrap();
        // p_1 = 0.7, p_2 = 0.8
        assert!((b[(0, 0)] - 0.2 / 0.7).abs() < 1e-15);
        assert!((b[(1, 2)] - 0.5 / 0.8).abs() < 1e-15);
        let m = ml(2, 3);
        let tb = m.theta_from_b(&b).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let x = [rng.random_range(0.0..3.0), rng.random_range(0.0..3.0)];
            let (a, b) = (stdf(&mo, &th, &x).unwrap(), stdf(&m, &tb, &x).unwrap());
            assert!((a - b).abs() < 1e-14 * a, "{a} vs {b}");
        }
        assert!(matches!(mo.b_matrix(&[0.0, 1.0]), Err(Error::OutOfDomain(_))));
    }

    #[test]
    fn json_round_trip_and_validation() {
        let m = ModelSpec::from_json(r#"{"family":"max_linear","d":2,"r":4,"dropped_column":0}"#).unwrap();
        assert_eq!(m.dropped_column(), 0);
        let back = serde_json::to_string(&m).unwrap();
        assert_eq!(ModelSpec::from_json(&back).unwrap(), m);
        let br = ModelSpec::from_json(r#"{"family":"brown_resnick","d":2,"locations":[[0,0],[1,0]]}"#).unwrap();
        assert_eq!(br.p(), 2);
        assert!(ModelSpec::from_json(r#"{"family":"brown_resnick","d":2,"locations":[[0,0],[0,0]]}"#).is_err());
        assert!(ModelSpec::from_json(r#"{"family":"logistic","d":1}"#).is_err());
        assert!(ModelSpec::from_json(r#"{"family":"max_linear","d":2}"#).is_err());
        assert!(ModelSpec::from_json(r#"{"family":"max_linear","d":2,"r":0}"#).is_err());
        assert!(ModelSpec::from_json(r#"{"family":"marshall_olkin","d":2,"subsets":[[0],[0,1]]}"#).is_ok());
        assert!(ModelSpec::from_json(r#"{"family":"marshall_olkin","d":2,"subsets":[[0],[0]]}"#).is_err());
    }

    /// Random admissible parameter for each family.
    fn random_theta(model: &ModelSpec, rng: &mut ChaCha8Rng) -> Vec<f64> {
        match model.family() {
            Family::Logistic => vec![rng.random_range(0.05..1.0)],
            Family::BrownResnick => vec![rng.random_range(0.2..5.0), rng.random_range(0.1..2.0)],
            Family::MaxLinear => {
                let (d, r) = (model.d(), model.r());
                let raw: Vec<f64> = (0..d * r).map(|_| rng.random::<f64>()).collect();
                let b = DMatrix::from_fn(d, r, |j, t| {
                    raw[j * r + t] / raw[j * r..(j + 1) * r].iter().sum::<f64>()
                });
                model.theta_from_b(&b).unwrap()
            }
            Family::MarshallOlkin => {
                let raw: Vec<f64> = (0..model.r()).map(|_| rng.random_range(0.05..1.0)).collect();
                let s: f64 = raw.iter().sum();
                raw[..model.r() - 1].iter().map(|v| v / s).collect()
            }
        }
    }

    fn random_point(model: &ModelSpec, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let d = model.d();
        let mut x: Vec<f64> = (0..d).map(|_| rng.random_range(0.0..2.0)).collect();
        if model.family() == Family::BrownResnick {
            let keep = [rng.random_range(0..d), rng.random_range(0..d)];
            for (j, v) in x.iter_mut().enumerate() {
                if !keep.contains(&j) {
                    *v = 0.0;
                }
            }
        }
        x
    }

    fn families() -> Vec<ModelSpec> {
        vec![
            ModelSpec::logistic(3).unwrap(),
            ModelSpec::brown_resnick(vec![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [2.0, 1.0]]).unwrap(),
            ml(3, 3),
            ModelSpec::marshall_olkin(3, vec![vec![0], vec![1], vec![2], vec![0, 1, 2]]).unwrap(),
        ]
    }

    #[test]
    fn property_suite() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for model in families() {
            for _ in 0..1000 {
                let th = random_theta(&model, &mut rng);
                let f = model.at(&th).unwrap();
                let x = random_point(&model, &mut rng);
                let v = f.value(&x).unwrap();
                let t = rng.random_range(0.1..10.0);
                let xt: Vec<f64> = x.iter().map(|v| v * t).collect();
                assert!((f.value(&xt).unwrap() - t * v).abs() <= 1e-12 * (1.0 + t * v));
                let mx = x.iter().cloned().fold(0.0, f64::max);
                let sum: f64 = x.iter().sum();
                assert!(v >= mx - 1e-12 && v <= sum + 1e-12, "{model:?} {th:?} {x:?} {v}");
                let y = random_point(&model, &mut rng);
                let y = if model.family() == Family::BrownResnick {
                    x.iter().map(|v| v * rng.random_range(0.0..2.0)).collect()
                } else {
                    y
                };
                let mid: Vec<f64> = x.iter().zip(&y).map(|(a, b)| 0.5 * (a + b)).collect();
                assert!(f.value(&mid).unwrap() <= 0.5 * (v + f.value(&y).unwrap()) + 1e-10);
                for j in 0..model.d() {
                    let mut e = vec![0.0; model.d()];
                    e[j] = 1.0;
                    assert!((f.value(&e).unwrap() - 1.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn euler_identity_for_x_partials() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for model in families() {
            for _ in 0..200 {
                let th = random_theta(&model, &mut rng);
                let f = model.at(&th).unwrap();
                let x = random_point(&model, &mut rng);
                let g = f.x_partials(&x);
                let lhs: f64 = g.iter().zip(&x).map(|(a, b)| a * b).sum();
                assert!((lhs - f.value(&x).unwrap()).abs() < 1e-9, "{model:?}");
            }
        }
    }

    proptest! {
        #[test]
        fn maxlinear_column_permutation_invariance(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = ml(3, 4);
            let th = random_theta(&m, &mut rng);
            let b = m.b_matrix(&th).unwrap();
            let perm = [2usize, 0, 3, 1];
            let tp = m.theta_from_b(&permute_columns(&b, &perm)).unwrap();
            let x = random_point(&m, &mut rng);
            prop_assert!((stdf(&m, &th, &x).unwrap() - stdf(&m, &tp, &x).unwrap()).abs() < 1e-12);
        }
    }
}
