//! Box- and group-constrained minimization: projected Nelder–Mead,
//! Latin-hypercube starts and a projected Levenberg–Marquardt polish for
//! least squares objectives.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;

/// `{x : lower ≤ x ≤ upper, Σ_{i∈G} x_i ≤ cap_G}` with disjoint groups `G`.
#[derive(Debug, Clone, PartialEq)]
pub struct Feasible {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub groups: Vec<(Vec<usize>, f64)>,
}

impl Feasible {
    pub fn boxed(lower: Vec<f64>, upper: Vec<f64>) -> Self {
        Self {
            lower,
            upper,
            groups: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    /// Euclidean projection onto the set.
    pub fn project(&self, x: &mut [f64]) {
        let orig = x.to_vec();
        for ((v, &lo), &hi) in x.iter_mut().zip(&self.lower).zip(&self.upper) {
            *v = v.clamp(lo, hi);
        }
        for (idx, cap) in &self.groups {
            let sum: f64 = idx.iter().map(|&i| x[i]).sum();
            if sum <= *cap {
                continue;
            }
            // the capped projection shifts the unclipped values
            let y: Vec<f64> = idx.iter().map(|&i| orig[i]).collect();
            let shifted = |tau: f64| -> f64 {
                idx.iter()
                    .zip(&y)
                    .map(|(&i, &yi)| (yi - tau).clamp(self.lower[i], self.upper[i]))
                    .sum()
            };
            let (mut a, mut b) = (
                0.0,
                y.iter().cloned().fold(0.0, f64::max)
                    - idx.iter().map(|&i| self.lower[i]).fold(f64::INFINITY, f64::min),
            );
            for _ in 0..200 {
                let m = 0.5 * (a + b);
                if shifted(m) > *cap {
                    a = m;
                } else {
                    b = m;
                }
                if b - a < 1e-16 {
                    break;
                }
            }
            for (&i, &yi) in idx.iter().zip(&y) {
                x[i] = (yi - b).clamp(self.lower[i], self.upper[i]);
            }
        }
    }

    pub fn contains(&self, x: &[f64], tol: f64) -> bool {
        x.iter()
            .zip(&self.lower)
            .zip(&self.upper)
            .all(|((&v, &lo), &hi)| v >= lo - tol && v <= hi + tol)
            && self
                .groups
                .iter()
                .all(|(idx, cap)| idx.iter().map(|&i| x[i]).sum::<f64>() <= cap + tol)
    }

    /// Whether the group containing coordinate `i` has its cap active at `x`.
    pub fn group_active(&self, x: &[f64], i: usize, tol: f64) -> bool {
        self.groups
            .iter()
            .any(|(idx, cap)| idx.contains(&i) && idx.iter().map(|&j| x[j]).sum::<f64>() >= cap - tol)
    }
}

/// Latin-hypercube sample of `count` points in the box `[lo, hi]`.
pub fn latin_hypercube(rng: &mut impl Rng, count: usize, lo: &[f64], hi: &[f64]) -> Vec<Vec<f64>> {
    let p = lo.len();
    let mut pts = vec![vec![0.0; p]; count];
    for i in 0..p {
        let mut strata: Vec<usize> = (0..count).collect();
        strata.shuffle(rng);
        for (pt, s) in pts.iter_mut().zip(strata) {
            let u = (s as f64 + rng.random::<f64>()) / count as f64;
            pt[i] = lo[i] + u * (hi[i] - lo[i]);
        }
    }
    pts
}

#[derive(Debug, Clone, Copy)]
pub struct NelderMeadOptions {
    /// Stop when the simplex diameter falls below this.
    pub x_tol: f64,
    /// Stop when the spread of simplex values falls below `f_tol (1 + |f_best|)`.
    pub f_tol: f64,
    pub max_evals: usize,
    /// Initial simplex edge as a fraction of the search box width.
    pub initial_step: f64,
}

impl Default for NelderMeadOptions {
    fn default() -> Self {
        Self {
            x_tol: 1e-8,
            f_tol: 1e-10,
            max_evals: 0,
            initial_step: 0.1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub f: f64,
    pub evals: usize,
    pub converged: bool,
}

/// Nelder–Mead with every trial point projected onto `feasible`, restarted
/// from the best vertex until a restart no longer improves the value.
pub fn nelder_mead(
    f: &dyn Fn(&[f64]) -> f64,
    x0: &[f64],
    feasible: &Feasible,
    width: &[f64],
    opts: NelderMeadOptions,
) -> Minimum {
    let p = x0.len();
    let max_evals = if opts.max_evals == 0 {
        200 * p + 400
    } else {
        opts.max_evals
    };
    let mut best = x0.to_vec();
    feasible.project(&mut best);
    let mut fbest = f(&best);
    let mut evals = 1;
    let mut converged = false;
    for restart in 0..4 {
        let step = opts.initial_step / (1u32 << restart) as f64;
        let run = nm_once(f, &best, fbest, feasible, width, step, opts, max_evals);
        evals += run.evals;
        let improved = run.f < fbest - opts.f_tol * (1.0 + fbest.abs());
        if run.f <= fbest {
            best = run.x;
            fbest = run.f;
        }
        converged = run.converged;
        if !improved {
            break;
        }
    }
    Minimum {
        x: best,
        f: fbest,
        evals,
        converged,
    }
}

#[allow(clippy::too_many_arguments)]
fn nm_once(
    f: &dyn Fn(&[f64]) -> f64,
    x0: &[f64],
    f0: f64,
    feasible: &Feasible,
    width: &[f64],
    step: f64,
    opts: NelderMeadOptions,
    max_evals: usize,
) -> Minimum {
    let p = x0.len();
    if p == 0 {
        return Minimum {
            x: Vec::new(),
            f: f0,
            evals: 0,
            converged: true,
        };
    }
    let mut evals = 0;
    let eval = |x: &[f64], evals: &mut usize| {
        *evals += 1;
        let v = f(x);
        if v.is_nan() {
            f64::INFINITY
        } else {
            v
        }
    };
    let mut simplex: Vec<(Vec<f64>, f64)> = vec![(x0.to_vec(), f0)];
    for i in 0..p {
        let mut v = x0.to_vec();
        let h = step * width[i].max(1e-3);
        v[i] += h;
        feasible.project(&mut v);
        if (v[i] - x0[i]).abs() < 0.5 * h {
            v = x0.to_vec();
            v[i] -= h;
            feasible.project(&mut v);
        }
        let fv = eval(&v, &mut evals);
        simplex.push((v, fv));
    }
    let (alpha, gamma, rho, sigma) = (1.0, 2.0, 0.5, 0.5);
    let mut converged = false;
    while evals < max_evals {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let fb = simplex[0].1;
        let spread = simplex[p].1 - fb;
        let diameter = simplex[1..]
            .iter()
            .map(|(v, _)| {
                v.iter()
                    .zip(&simplex[0].0)
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max)
            })
            .fold(0.0, f64::max);
        if diameter < opts.x_tol || (spread.is_finite() && spread < opts.f_tol * (1.0 + fb.abs())) {
            converged = true;
            break;
        }
        let mut centroid = vec![0.0; p];
        for (v, _) in &simplex[..p] {
            for (c, x) in centroid.iter_mut().zip(v) {
                *c += x / p as f64;
            }
        }
        let toward = |t: f64| -> Vec<f64> {
            let mut v: Vec<f64> = centroid
                .iter()
                .zip(&simplex[p].0)
                .map(|(c, w)| c + t * (c - w))
                .collect();
            feasible.project(&mut v);
            v
        };
        let xr = toward(alpha);
        let fr = eval(&xr, &mut evals);
        if fr < simplex[0].1 {
            let xe = toward(gamma);
            let fe = eval(&xe, &mut evals);
            simplex[p] = if fe < fr { (xe, fe) } else { (xr, fr) };
            continue;
        }
        if fr < simplex[p - 1].1 {
            simplex[p] = (xr, fr);
            continue;
        }
        let (xc, fc) = if fr < simplex[p].1 {
            let xc = toward(rho * alpha);
            let fc = eval(&xc, &mut evals);
            (xc, fc)
        } else {
            let xc = toward(-rho);
            let fc = eval(&xc, &mut evals);
            (xc, fc)
        };
        if fc < simplex[p].1.min(fr) {
            simplex[p] = (xc, fc);
            continue;
        }
        let x_best = simplex[0].0.clone();
        for vertex in simplex.iter_mut().skip(1) {
            let mut v: Vec<f64> = x_best.iter().zip(&vertex.0).map(|(b, x)| b + sigma * (x - b)).collect();
            feasible.project(&mut v);
            let fv = eval(&v, &mut evals);
            *vertex = (v, fv);
        }
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    let (x, fx) = simplex.swap_remove(0);
    Minimum {
        x,
        f: fx,
        evals,
        converged,
    }
}

/// Residual vector `D(θ)` and its Jacobian `∂L/∂θ` (so that `∂D/∂θ = -L̇`).
pub type ResidualJacobian<'a> = dyn Fn(&[f64]) -> Option<(Vec<f64>, DMatrix<f64>)> + 'a;

/// Projected Levenberg–Marquardt iterations on `DᵀΩD`. Coordinates sitting on
/// a bound whose descent direction points outward are held fixed.
pub fn least_squares_polish(
    rj: &ResidualJacobian<'_>,
    omega: Option<&DMatrix<f64>>,
    x0: &[f64],
    feasible: &Feasible,
    max_iter: usize,
) -> Option<Minimum> {
    let objective = |d: &[f64]| -> f64 {
        let dv = DVector::from_column_slice(d);
        match omega {
            Some(o) => dv.dot(&(o * &dv)),
            None => dv.norm_squared(),
        }
    };
    let mut x = x0.to_vec();
    let (mut d, mut jac) = rj(&x)?;
    let mut fx = objective(&d);
    let mut mu = 1e-6;
    let mut evals = 1;
    let mut converged = false;
    for _ in 0..max_iter {
        let dv = DVector::from_column_slice(&d);
        let wd = match omega {
            Some(o) => o * &dv,
            None => dv.clone(),
        };
        let grad = jac.transpose() * &wd; // descent direction for θ
        let free: Vec<usize> = (0..x.len())
            .filter(|&i| {
                let at_lo = x[i] <= feasible.lower[i] + 1e-12;
                let at_hi = x[i] >= feasible.upper[i] - 1e-12;
                !(at_lo && grad[i] < 0.0 || at_hi && grad[i] > 0.0)
            })
            .collect();
        if free.is_empty() {
            converged = true;
            break;
        }
        let jf = jac.select_columns(&free);
        let normal = match omega {
            Some(o) => jf.transpose() * o * &jf,
            None => jf.transpose() * &jf,
        };
        let rhs = jf.transpose() * &wd;
        let mut accepted = false;
        for _ in 0..12 {
            let mut a = normal.clone();
            let scale = normal.diagonal().max().max(1e-12);
            for i in 0..free.len() {
                a[(i, i)] += mu * scale;
            }
            let Some(step) = a.cholesky().map(|c| c.solve(&rhs)) else {
                mu *= 10.0;
                continue;
            };
            let mut trial = x.clone();
            for (s, &i) in step.iter().zip(&free) {
                trial[i] += s;
            }
            feasible.project(&mut trial);
            evals += 1;
            let Some((dt, jt)) = rj(&trial) else {
                mu *= 10.0;
                continue;
            };
            let ft = objective(&dt);
            if ft <= fx {
                let gain = fx - ft;
                let moved = trial.iter().zip(&x).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                x = trial;
                d = dt;
                jac = jt;
                fx = ft;
                mu = (mu / 10.0).max(1e-12);
                accepted = true;
                if gain <= 1e-14 * (1.0 + fx) || moved < 1e-12 {
                    converged = true;
                }
                break;
            }
            mu *= 10.0;
        }
        if !accepted || converged {
            converged = true;
            break;
        }
    }
    Some(Minimum {
        x,
        f: fx,
        evals,
        converged,
    })
}
