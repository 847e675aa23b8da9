//! Limit law of the least squares estimator: the covariance Σ of the
//! nonparametric estimator, the matrices J and 𝒥, cone projections and
//! simulation of the projected Gaussian limit.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::empirical::EvalGrid;
use crate::error::{Error, Result};
use crate::models::{ldot_at, ModelSpec, ParamSpace, Stdf};

/// Serde adapter storing matrices as arrays of rows.
pub(crate) mod rows {
    use nalgebra::DMatrix;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
        m.row_iter().map(|r| r.iter().cloned().collect()).collect()
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<DMatrix<f64>, String> {
        let nr = rows.len();
        let nc = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != nc) {
            return Err("ragged matrix".into());
        }
        Ok(DMatrix::from_fn(nr, nc, |i, j| rows[i][j]))
    }

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        to_rows(m).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        from_rows(&rows).map_err(serde::de::Error::custom)
    }

    pub mod opt {
        use super::*;

        pub fn serialize<S: Serializer>(m: &Option<DMatrix<f64>>, s: S) -> Result<S::Ok, S::Error> {
            m.as_ref().map(to_rows).serialize(s)
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<DMatrix<f64>>, D::Error> {
            Option::<Vec<Vec<f64>>>::deserialize(d)?
                .map(|r| from_rows(&r).map_err(serde::de::Error::custom))
                .transpose()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConeTag {
    /// `ℝ`
    Free,
    /// `[0, ∞)`
    Nonneg,
    /// `(−∞, 0]`
    Nonpos,
}

impl ConeTag {
    fn admits(self, v: f64, tol: f64) -> bool {
        match self {
            ConeTag::Free => true,
            ConeTag::Nonneg => v >= -tol,
            ConeTag::Nonpos => v <= tol,
        }
    }
}

/// `Λ = Λ_β × ℝ^{p−c}` with `Λ_β` a product of half-lines and lines over the
/// tested coordinates.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cone {
    p: usize,
    tested: Vec<usize>,
    tags: Vec<ConeTag>,
}

impl Cone {
    pub fn new(p: usize, tested: Vec<usize>, tags: Vec<ConeTag>) -> Result<Self> {
        if tested.len() != tags.len() {
            return Err(Error::DimensionMismatch {
                expected: tested.len(),
                got: tags.len(),
            });
        }
        for (a, &i) in tested.iter().enumerate() {
            if i >= p {
                return Err(Error::invalid(format!("tested coordinate {i} out of range")));
            }
            if tested[..a].contains(&i) {
                return Err(Error::invalid(format!("tested coordinate {i} repeated")));
            }
        }
        Ok(Self { p, tested, tags })
    }

    /// Cone implied by placing the tested coordinates at `beta_star`.
    pub fn for_null(space: &ParamSpace, tested: &[usize], beta_star: &[f64]) -> Result<Self> {
        if tested.len() != beta_star.len() {
            return Err(Error::DimensionMismatch {
                expected: tested.len(),
                got: beta_star.len(),
            });
        }
        let tags = tested
            .iter()
            .zip(beta_star)
            .map(|(&i, &b)| {
                if i >= space.p() {
                    return Err(Error::invalid(format!("tested coordinate {i} out of range")));
                }
                let (lo, hi) = (space.lower[i], space.upper[i]);
                if b < lo - 1e-9 || b > hi + 1e-9 {
                    return Err(Error::OutOfDomain(format!(
                        "null value {b} for coordinate {i} outside [{lo}, {hi}]"
                    )));
                }
                Ok(if b <= lo + 1e-9 {
                    ConeTag::Nonneg
                } else if b >= hi - 1e-9 {
                    ConeTag::Nonpos
                } else {
                    ConeTag::Free
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(space.p(), tested.to_vec(), tags)
    }

    /// Whole space `ℝ^p` with the given coordinates marked as tested.
    pub fn free(p: usize, tested: Vec<usize>) -> Result<Self> {
        let c = tested.len();
        Self::new(p, tested, vec![ConeTag::Free; c])
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn c(&self) -> usize {
        self.tested.len()
    }

    pub fn tested(&self) -> &[usize] {
        &self.tested
    }

    pub fn tags(&self) -> &[ConeTag] {
        &self.tags
    }

    /// Tags for all `p` coordinates (untested ones are free).
    pub fn full_tags(&self) -> Vec<ConeTag> {
        let mut t = vec![ConeTag::Free; self.p];
        for (&i, &tag) in self.tested.iter().zip(&self.tags) {
            t[i] = tag;
        }
        t
    }

    /// `H`: the `c × p` selection matrix of the tested coordinates.
    pub fn selection(&self) -> DMatrix<f64> {
        let mut h = DMatrix::zeros(self.c(), self.p);
        for (r, &i) in self.tested.iter().enumerate() {
            h[(r, i)] = 1.0;
        }
        h
    }
}

/// Minimizer of `(λ − Y)ᵀ M (λ − Y)` over a product cone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConeProjection {
    pub lambda: Vec<f64>,
    /// Constrained coordinates pinned at zero.
    pub active: Vec<usize>,
    /// Attained value of the quadratic form.
    pub distance: f64,
}

const MAX_CONSTRAINED: usize = 12;

/// Projects `y` onto the product cone described by `tags` in the metric `m`.
///
/// One constrained coordinate and two constrained coordinates use closed
/// forms; otherwise all faces of the constrained coordinates are enumerated.
pub fn project_cone(y: &[f64], m: &DMatrix<f64>, tags: &[ConeTag]) -> Result<ConeProjection> {
    let n = y.len();
    if m.nrows() != n || m.ncols() != n || tags.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: m.nrows(),
        });
    }
    if m.clone().cholesky().is_none() {
        return Err(Error::Singular("projection metric is not positive definite".into()));
    }
    if tags.iter().filter(|t| **t != ConeTag::Free).count() > MAX_CONSTRAINED {
        return Err(Error::Unsupported(format!(
            "more than {MAX_CONSTRAINED} constrained coordinates"
        )));
    }
    Ok(project_validated(y, m, tags))
}

/// [`project_cone`] for inputs already known to be valid.
fn project_validated(y: &[f64], m: &DMatrix<f64>, tags: &[ConeTag]) -> ConeProjection {
    let n = y.len();
    let constrained: Vec<usize> = (0..n).filter(|&i| tags[i] != ConeTag::Free).collect();
    if constrained.iter().all(|&i| tags[i].admits(y[i], 0.0)) {
        return ConeProjection {
            lambda: y.to_vec(),
            active: Vec::new(),
            distance: 0.0,
        };
    }
    if n == 1 {
        return ConeProjection {
            lambda: vec![0.0],
            active: vec![0],
            distance: m[(0, 0)] * y[0] * y[0],
        };
    }
    if n == 2 && constrained.len() == 2 {
        return project_two(y, m, tags);
    }
    enumerate_faces(y, m, tags, &constrained)
}

/// Two sign-constrained coordinates. With `ρ = M⁻¹` and both constraints
/// of the form `λ_i ≥ 0` (others are reduced to it by sign flips):
/// `Y` if feasible; `(Y_1 − ρ_12/ρ_22 Y_2, 0)` if that is feasible and
/// `Y_2 < 0`; the symmetric case; otherwise the origin.
fn project_two(y: &[f64], m: &DMatrix<f64>, tags: &[ConeTag]) -> ConeProjection {
    let s: Vec<f64> = tags
        .iter()
        .map(|t| if *t == ConeTag::Nonpos { -1.0 } else { 1.0 })
        .collect();
    let z = [s[0] * y[0], s[1] * y[1]];
    let (m11, m12, m22) = (m[(0, 0)], s[0] * s[1] * m[(0, 1)], m[(1, 1)]);
    let det = m11 * m22 - m12 * m12;
    let (r11, r12, r22) = (m22 / det, -m12 / det, m11 / det);
    let q = |l: [f64; 2]| {
        let (a, b) = (l[0] - z[0], l[1] - z[1]);
        m11 * a * a + 2.0 * m12 * a * b + m22 * b * b
    };
    let first = z[0] - r12 / r22 * z[1];
    let second = z[1] - r12 / r11 * z[0];
    let (l, active) = if z[0] >= 0.0 && z[1] >= 0.0 {
        ([z[0], z[1]], vec![])
    } else if first >= 0.0 && z[1] < 0.0 {
        ([first, 0.0], vec![1])
    } else if second >= 0.0 && z[0] < 0.0 {
        ([0.0, second], vec![0])
    } else {
        ([0.0, 0.0], vec![0, 1])
    };
    ConeProjection {
        lambda: vec![s[0] * l[0], s[1] * l[1]],
        active,
        distance: q(l),
    }
}

fn enumerate_faces(y: &[f64], m: &DMatrix<f64>, tags: &[ConeTag], constrained: &[usize]) -> ConeProjection {
    let n = y.len();
    let mut best: Option<ConeProjection> = None;
    for mask in 0u32..(1u32 << constrained.len()) {
        let active: Vec<usize> = constrained
            .iter()
            .enumerate()
            .filter(|(b, _)| mask >> b & 1 == 1)
            .map(|(_, &i)| i)
            .collect();
        let free: Vec<usize> = (0..n).filter(|i| !active.contains(i)).collect();
        let mut lambda = vec![0.0; n];
        if !free.is_empty() {
            let mff = DMatrix::from_fn(free.len(), free.len(), |a, b| m[(free[a], free[b])]);
            let mfa_ya = DVector::from_fn(free.len(), |a, _| {
                active.iter().map(|&j| m[(free[a], j)] * y[j]).sum::<f64>()
            });
            let Some(sol) = mff.cholesky().map(|c| c.solve(&mfa_ya)) else {
                continue;
            };
            for (a, &i) in free.iter().enumerate() {
                lambda[i] = y[i] + sol[a];
            }
        }
        if !constrained.iter().all(|&i| tags[i].admits(lambda[i], 0.0)) {
            continue;
        }
        let diff = DVector::from_fn(n, |i, _| lambda[i] - y[i]);
        let distance = diff.dot(&(m * &diff));
        if best.as_ref().is_none_or(|b| distance < b.distance) {
            best = Some(ConeProjection {
                lambda,
                active,
                distance,
            });
        }
    }
    // the all-active face is always feasible
    best.expect("at least one feasible face")
}

/// Covariance matrix of the limit of `√k (ℓ̂(c_m) − ℓ(c_m))` over the grid.
///
/// With `C(x, y) = ℓ(x) + ℓ(y) − ℓ(x ∨ y)` and `ℓ̇_j` the partial
/// derivatives, entry `(m, m')` is
/// `C(x, y) − Σ_j' ℓ̇_j'(y) C(x, y_j' e_j') − Σ_j ℓ̇_j(x) C(x_j e_j, y)
///  + Σ_j Σ_j' ℓ̇_j(x) ℓ̇_j'(y) C(x_j e_j, y_j' e_j')` for `x = c_m, y = c_m'`.
pub fn compute_sigma(model: &ModelSpec, theta: &[f64], grid: &EvalGrid) -> Result<DMatrix<f64>> {
    model.check_grid(grid)?;
    let f = model.at(theta)?;
    Ok(sigma_at(&f, grid))
}

pub(crate) fn sigma_at(f: &Stdf, grid: &EvalGrid) -> DMatrix<f64> {
    let pts = grid.points();
    let q = pts.len();
    let d = f.d();
    let ell: Vec<f64> = pts.iter().map(|x| f.value_unchecked(x)).collect();
    let partials: Vec<Vec<f64>> = pts.iter().map(|x| f.x_partials(x)).collect();
    let support: Vec<Vec<usize>> = pts.iter().map(|x| (0..d).filter(|&j| x[j] > 0.0).collect()).collect();
    // C(x, b e_j) = ℓ(x) + b − ℓ(x ∨ b e_j), precomputed per (point, other point, coord)
    let cross = |m: usize, j: usize, b: f64| -> f64 {
        let x = &pts[m];
        if b <= x[j] {
            return b;
        }
        let mut z = x.clone();
        z[j] = b;
        ell[m] + b - f.value_unchecked(&z)
    };
    let pair = |j: usize, a: f64, j2: usize, b: f64| -> f64 {
        if j == j2 {
            a.min(b)
        } else {
            let mut z = vec![0.0; d];
            z[j] = a;
            z[j2] = b;
            a + b - f.value_unchecked(&z)
        }
    };
    let rows: Vec<Vec<f64>> = (0..q)
        .into_par_iter()
        .map(|m| {
            let x = &pts[m];
            (m..q)
                .map(|m2| {
                    let y = &pts[m2];
                    let joint: Vec<f64> = x.iter().zip(y).map(|(a, b)| a.max(*b)).collect();
                    let mut s = ell[m] + ell[m2] - f.value_unchecked(&joint);
                    for &j2 in &support[m2] {
                        s -= partials[m2][j2] * cross(m, j2, y[j2]);
                    }
                    for &j in &support[m] {
                        s -= partials[m][j] * cross(m2, j, x[j]);
                    }
                    for &j in &support[m] {
                        for &j2 in &support[m2] {
                            s += partials[m][j] * partials[m2][j2] * pair(j, x[j], j2, y[j2]);
                        }
                    }
                    s
                })
                .collect()
        })
        .collect();
    let mut sigma = DMatrix::zeros(q, q);
    for (m, row) in rows.iter().enumerate() {
        for (o, v) in row.iter().enumerate() {
            sigma[(m, m + o)] = *v;
            sigma[(m + o, m)] = *v;
        }
    }
    sigma
}

/// Ingredients of the limit law at a parameter value.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LimitSpec {
    #[serde(rename = "J", with = "rows")]
    pub j: DMatrix<f64>,
    #[serde(rename = "Sigma", with = "rows")]
    pub sigma: DMatrix<f64>,
    #[serde(rename = "calJ", with = "rows")]
    pub cal_j: DMatrix<f64>,
    #[serde(rename = "Ldot", with = "rows")]
    pub ldot: DMatrix<f64>,
    /// `None` stands for the identity.
    #[serde(rename = "Omega", with = "rows::opt")]
    pub omega: Option<DMatrix<f64>>,
    pub cone: Cone,
    #[serde(rename = "H", with = "rows")]
    pub h: DMatrix<f64>,
    pub smallest_singular_value: f64,
}

/// Assembles `J = L̇ᵀΩL̇`, `Σ`, `𝒥 = L̇ᵀΩΣΩL̇` and `H` at θ.
pub fn limit_ingredients(
    model: &ModelSpec,
    theta: &[f64],
    grid: &EvalGrid,
    omega: Option<&DMatrix<f64>>,
    cone: &Cone,
) -> Result<LimitSpec> {
    model.check_grid(grid)?;
    if cone.p() != model.p() {
        return Err(Error::DimensionMismatch {
            expected: model.p(),
            got: cone.p(),
        });
    }
    let f = model.at(theta)?;
    let ld = ldot_at(model, &f, theta, grid, &model.space());
    if ld.rank_deficient() {
        return Err(Error::Singular(format!(
            "L̇ is rank deficient (smallest singular value {:e})",
            ld.smallest_singular_value
        )));
    }
    let sigma = sigma_at(&f, grid);
    from_parts(
        ld.matrix,
        sigma,
        omega.cloned(),
        cone.clone(),
        ld.smallest_singular_value,
    )
}

/// Builds a limit specification from `L̇`, `Σ` and `Ω` directly.
pub fn from_parts(
    ldot: DMatrix<f64>,
    sigma: DMatrix<f64>,
    omega: Option<DMatrix<f64>>,
    cone: Cone,
    smallest_singular_value: f64,
) -> Result<LimitSpec> {
    let q = ldot.nrows();
    if sigma.nrows() != q || omega.as_ref().is_some_and(|o| o.nrows() != q || o.ncols() != q) {
        return Err(Error::DimensionMismatch {
            expected: q,
            got: sigma.nrows(),
        });
    }
    let wl = match &omega {
        Some(o) => o * &ldot,
        None => ldot.clone(),
    };
    let j = ldot.transpose() * &wl;
    let cal_j = wl.transpose() * &sigma * &wl;
    let h = cone.selection();
    Ok(LimitSpec {
        j: symmetrize(j),
        sigma,
        cal_j: symmetrize(cal_j),
        ldot,
        omega,
        cone,
        h,
        smallest_singular_value,
    })
}

fn symmetrize(m: DMatrix<f64>) -> DMatrix<f64> {
    (&m + m.transpose()) * 0.5
}

/// Symmetric square root with negative eigenvalues clipped to zero.
pub fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = symmetrize(m.clone()).symmetric_eigen();
    let vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

fn inverse(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let inv = m
        .clone()
        .cholesky()
        .map(|c| c.inverse())
        .or_else(|| m.clone().try_inverse())
        .ok_or_else(|| Error::Singular(format!("{what} is singular")))?;
    if inv.iter().any(|v| !v.is_finite()) {
        return Err(Error::Singular(format!("{what} is singular")));
    }
    Ok(inv)
}

impl LimitSpec {
    pub fn j_inverse(&self) -> Result<DMatrix<f64>> {
        inverse(&self.j, "J")
    }

    /// `ρ = H J⁻¹ Hᵀ`.
    pub fn rho(&self) -> Result<DMatrix<f64>> {
        let ji = self.j_inverse()?;
        Ok(symmetrize(&self.h * ji * self.h.transpose()))
    }

    /// Asymptotic covariance `J⁻¹ 𝒥 J⁻¹` of `√k (θ̂ − θ)` in the interior.
    pub fn sandwich(&self) -> Result<DMatrix<f64>> {
        let ji = self.j_inverse()?;
        Ok(symmetrize(&ji * &self.cal_j * &ji))
    }
}

/// Simulated draws of the limit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LimitSample {
    pub c: usize,
    /// `λ̂_β` draws, row-major `n_draws × c`.
    pub lambda_beta: Vec<f64>,
    /// `λ̂_βᵀ (H J⁻¹ Hᵀ)⁻¹ λ̂_β`.
    pub statistics: Vec<f64>,
    pub seed: u64,
}

impl LimitSample {
    pub fn n_draws(&self) -> usize {
        self.statistics.len()
    }

    /// Empirical `1 − level` quantile of the statistic.
    pub fn critical_value(&self, level: f64) -> f64 {
        let mut s = self.statistics.clone();
        s.sort_by(f64::total_cmp);
        crate::empirical::empirical_quantile(&s, 1.0 - level)
    }

    /// Share of draws at least as large as `statistic`.
    pub fn p_value(&self, statistic: f64) -> f64 {
        let hits = self.statistics.iter().filter(|&&s| s >= statistic).count();
        hits as f64 / self.statistics.len() as f64
    }

    pub fn write_csv(&self, out: &mut impl std::io::Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header: Vec<String> = (1..=self.c).map(|i| format!("lambda_{i}")).collect();
        header.push("statistic".into());
        w.write_record(&header)?;
        for (i, s) in self.statistics.iter().enumerate() {
            let mut rec: Vec<String> = self.lambda_beta[i * self.c..(i + 1) * self.c]
                .iter()
                .map(|v| v.to_string())
                .collect();
            rec.push(s.to_string());
            w.write_record(&rec)?;
        }
        w.flush().map_err(|source| Error::Io {
            path: "<limit sample>".into(),
            source,
        })
    }
}

pub const DEFAULT_DRAWS: usize = 100_000;
const PARTITION: usize = 10_000;

/// Runs `draw` over fixed-size partitions, partition `i` seeded with
/// `seed + i`, results concatenated in partition order.
fn partitioned<T: Send>(n_draws: usize, seed: u64, draw: impl Fn(&mut ChaCha8Rng) -> T + Sync) -> Vec<T> {
    let parts = n_draws.div_ceil(PARTITION);
    (0..parts)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64));
            let len = PARTITION.min(n_draws - i * PARTITION);
            (0..len).map(|_| draw(&mut rng)).collect::<Vec<T>>()
        })
        .flatten()
        .collect()
}

fn gaussian(rng: &mut ChaCha8Rng, root: &DMatrix<f64>) -> DVector<f64> {
    let z = DVector::from_fn(root.ncols(), |_, _| StandardNormal.sample(rng));
    root * z
}

/// Draws `λ̂_β = argmin_{λ∈Λ_β} (λ − Y_β)ᵀ(HJ⁻¹Hᵀ)⁻¹(λ − Y_β)` with
/// `Y_β = H J⁻¹ G`, `G ~ N_p(0, 𝒥)`, and the statistic `λ̂_βᵀ(HJ⁻¹Hᵀ)⁻¹λ̂_β`.
pub fn sample_limit(spec: &LimitSpec, n_draws: usize, seed: u64) -> Result<LimitSample> {
    if n_draws == 0 {
        return Err(Error::invalid("n_draws must be at least 1"));
    }
    let c = spec.cone.c();
    if c == 0 {
        return Err(Error::invalid("no tested coordinates"));
    }
    let ji = spec.j_inverse()?;
    let hj = &spec.h * &ji;
    let cov = symmetrize(&hj * &spec.cal_j * hj.transpose());
    let root = psd_sqrt(&cov);
    let metric = inverse(&symmetrize(&hj * spec.h.transpose()), "H J⁻¹ Hᵀ")?;
    let tags = spec.cone.tags().to_vec();
    project_cone(&vec![0.0; c], &metric, &tags)?;
    let draws = partitioned(n_draws, seed, |rng| {
        let y = gaussian(rng, &root);
        let proj = project_validated(y.as_slice(), &metric, &tags);
        let l = DVector::from_column_slice(&proj.lambda);
        let stat = l.dot(&(&metric * &l));
        (proj.lambda, stat)
    });
    let mut lambda_beta = Vec::with_capacity(n_draws * c);
    let mut statistics = Vec::with_capacity(n_draws);
    for (l, s) in draws {
        lambda_beta.extend(l);
        statistics.push(s.max(0.0));
    }
    Ok(LimitSample {
        c,
        lambda_beta,
        statistics,
        seed,
    })
}

/// Paired draws of the full limit `λ̂` of `√k(θ̂ − θ)`: once as the
/// projection of `Y = J⁻¹G` onto `Λ` in the metric `J`, and once through the
/// block form `λ̂_δ = J_δ⁻¹ G_δ − J_δ⁻¹ J_δβ λ̂_β`. Each entry is
/// `(full projection, block form)`, both `p`-vectors.
pub fn sample_limit_paired(spec: &LimitSpec, n_draws: usize, seed: u64) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
    let p = spec.cone.p();
    let tested = spec.cone.tested().to_vec();
    let others: Vec<usize> = (0..p).filter(|i| !tested.contains(i)).collect();
    let ji = spec.j_inverse()?;
    let root = psd_sqrt(&spec.cal_j);
    let full_tags = spec.cone.full_tags();
    let rho = symmetrize(&spec.h * &ji * spec.h.transpose());
    let metric_b = inverse(&rho, "H J⁻¹ Hᵀ")?;
    let sub =
        |rows: &[usize], cols: &[usize]| DMatrix::from_fn(rows.len(), cols.len(), |a, b| spec.j[(rows[a], cols[b])]);
    let jdd_inv = if others.is_empty() {
        DMatrix::zeros(0, 0)
    } else {
        inverse(&sub(&others, &others), "J_δδ")?
    };
    let jdb = sub(&others, &tested);
    let tags_b = spec.cone.tags().to_vec();
    project_cone(&vec![0.0; p], &spec.j, &full_tags)?;
    project_cone(&vec![0.0; tested.len()], &metric_b, &tags_b)?;
    Ok(partitioned(n_draws, seed, |rng| {
        let g = gaussian(rng, &root);
        let y = &ji * &g;
        let full = project_validated(y.as_slice(), &spec.j, &full_tags).lambda;
        let yb: Vec<f64> = tested.iter().map(|&i| y[i]).collect();
        let lb = project_validated(&yb, &metric_b, &tags_b).lambda;
        let gd = DVector::from_fn(others.len(), |a, _| g[others[a]]);
        let ld = &jdd_inv * (gd - &jdb * DVector::from_column_slice(&lb));
        let mut block = vec![0.0; p];
        for (a, &i) in tested.iter().enumerate() {
            block[i] = lb[a];
        }
        for (a, &i) in others.iter().enumerate() {
            block[i] = ld[a];
        }
        (full, block)
    }))
}

/// Standard errors of θ̂ at sample size parameter `k`: `√(diag(J⁻¹𝒥J⁻¹)/k)`
/// for coordinates whose cone component is a line, and the standard
/// deviation of the simulated projected limit over `√k` for constrained
/// coordinates.
pub fn standard_errors(spec: &LimitSpec, k: usize, n_draws: usize, seed: u64) -> Result<Vec<f64>> {
    let p = spec.cone.p();
    let cov = spec.sandwich()?;
    let mut se: Vec<f64> = (0..p).map(|i| (cov[(i, i)].max(0.0) / k as f64).sqrt()).collect();
    let tags = spec.cone.full_tags();
    if tags.iter().any(|t| *t != ConeTag::Free) {
        let draws = sample_limit_paired(spec, n_draws, seed)?;
        for i in (0..p).filter(|&i| tags[i] != ConeTag::Free) {
            let n = draws.len() as f64;
            let mean = draws.iter().map(|d| d.0[i]).sum::<f64>() / n;
            let var = draws.iter().map(|d| (d.0[i] - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
            se[i] = (var / k as f64).sqrt();
        }
    }
    Ok(se)
}
