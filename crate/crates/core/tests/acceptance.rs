//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! Simulation cells use 1000 replicates unless `TAILBOUND_ACCEPTANCE_REPLICATES`
//! overrides it. Criteria that check exact or distributional identities set the
//! exit code; the Monte Carlo reproduction cells report their measured level
//! and Monte Carlo standard error but do not abort the run.

use std::process::ExitCode;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

use tailbound::data::{ranks, RankMatrix};
use tailbound::empirical::{beta_stdf, empirical_stdf, estimate_on_grid, EvalGrid, StdfEstimate};
use tailbound::limit::{compute_sigma, from_parts, project_cone, sample_limit};
use tailbound::models::stdf;
use tailbound::sim::{self, designs, ExperimentTable, SimDesign};
use tailbound::stocks;
use tailbound::{Cone, ConeTag, EstimatorKind, Family, FitOptions, ModelSpec, StatisticKind, WlsProblem};

mod tol {
    /// Rejection percentages: target and half-width.
    pub const M1_LEVEL: (f64, f64) = (3.0, 1.5);
    pub const M3_LEVEL: (f64, f64) = (5.4, 2.0);
    pub const M2_DEVIANCE_K100: (f64, f64) = (40.3, 4.0);
    pub const FACTOR_LEVEL: (f64, f64) = (2.7, 1.5);
    pub const FACTOR_BETA_MIN: f64 = 15.0;
    pub const BR_D6_BETA_LEVEL: (f64, f64) = (4.3, 3.0);
    /// Elementwise bound on `|Σ − Σ̂_MC|` in Monte Carlo standard errors.
    pub const SIGMA_SE: f64 = 3.0;
    pub const SIGMA_DEGENERATE_ABS: f64 = 1e-10;
    pub const CONE_MATCH: f64 = 1e-6;
    pub const CONE_KKT: f64 = 1e-8;
    pub const QUANTILE_REL: f64 = 0.02;
    pub const SELF_CONSISTENCY: f64 = 1e-5;
    pub const HAND_ORACLE: f64 = 1e-12;
    pub const PROPERTY: f64 = 1e-10;
    pub const EXTREMAL_COEFFICIENT: f64 = 0.02;
    pub const PRINTED_MATRIX: f64 = 0.01;
}

struct Outcome {
    id: &'static str,
    name: String,
    pass: bool,
    gating: bool,
    detail: String,
}

#[derive(Default)]
struct Report {
    rows: Vec<Outcome>,
}

impl Report {
    fn record(&mut self, id: &'static str, name: impl Into<String>, pass: bool, gating: bool, detail: String) {
        let o = Outcome {
            id,
            name: name.into(),
            pass,
            gating,
            detail,
        };
        println!(
            "{} [{}] {}: {}",
            if o.pass { "PASS" } else { "FAIL" },
            o.id,
            o.name,
            o.detail
        );
        self.rows.push(o);
    }

    fn level(&mut self, id: &'static str, name: &str, cell: Option<&sim::Cell>, (target, band): (f64, f64)) {
        match cell {
            Some(c) => {
                let v = c.values[0];
                self.record(
                    id,
                    name,
                    (v - target).abs() <= band,
                    false,
                    format!(
                        "{v:.1}% (MC se {:.1}, {} ok / {} failed) vs {target} ± {band}",
                        c.mc_se[0], c.n_ok, c.n_failed
                    ),
                );
            }
            None => self.record(id, name, false, false, "cell missing".into()),
        }
    }
}

fn replicates() -> usize {
    std::env::var("TAILBOUND_ACCEPTANCE_REPLICATES")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(1000)
}

fn level_design(
    mut d: SimDesign,
    k: usize,
    est: EstimatorKind,
    stat: StatisticKind,
    reps: usize,
) -> tailbound::Result<SimDesign> {
    d.ks = vec![k];
    d.estimators = vec![est];
    d.replicates = reps;
    d.test.as_mut().expect("testing design").statistics = vec![stat];
    d.validate()?;
    Ok(d)
}

fn run_level(d: &SimDesign) -> Option<ExperimentTable> {
    match sim::run_level(d) {
        Ok(t) => Some(t),
        Err(e) => {
            println!("      {}: {e}", d.name);
            None
        }
    }
}

fn table_levels(report: &mut Report, reps: usize) {
    use EstimatorKind::{Beta, Empirical};
    use StatisticKind::{Deviance, Wald};
    let cases = [
        (
            "1",
            "M1 Wald k=25 empirical",
            designs::m1(),
            25,
            Empirical,
            Wald,
            tol::M1_LEVEL,
        ),
        (
            "1",
            "M3 Wald k=25 empirical",
            designs::m3(),
            25,
            Empirical,
            Wald,
            tol::M3_LEVEL,
        ),
        (
            "1",
            "M2 deviance k=100 empirical",
            designs::m2(),
            100,
            Empirical,
            Deviance,
            tol::M2_DEVIANCE_K100,
        ),
        (
            "2",
            "factor count Wald k=50 empirical",
            designs::factor_count(),
            50,
            Empirical,
            Wald,
            tol::FACTOR_LEVEL,
        ),
    ];
    for (id, name, design, k, est, stat, band) in cases {
        let model = design.name.clone();
        let d = level_design(design, k, est, stat, reps).expect("valid design");
        let table = run_level(&d);
        report.level(
            id,
            name,
            table.as_ref().and_then(|t| t.find(&model, k, est, Some(stat), None)),
            band,
        );
    }

    let d = level_design(designs::factor_count(), 50, Beta, Wald, reps).expect("valid design");
    let cell = run_level(&d).and_then(|t| t.find("factors", 50, Beta, Some(Wald), None).cloned());
    match cell {
        Some(c) => report.record(
            "2",
            "factor count Wald k=50 beta over-rejects",
            c.values[0] > tol::FACTOR_BETA_MIN,
            false,
            format!(
                "{:.1}% (MC se {:.1}) vs > {}",
                c.values[0],
                c.mc_se[0],
                tol::FACTOR_BETA_MIN
            ),
        ),
        None => report.record(
            "2",
            "factor count Wald k=50 beta over-rejects",
            false,
            false,
            "cell missing".into(),
        ),
    }
}

/// Monte Carlo covariance of `√k (ℓ̂ − ℓ)` against the analytic `Σ`.
fn sigma_gate(report: &mut Report) {
    let model = ModelSpec::max_linear(2, 2).unwrap();
    // At θ = (0.8, 0.3) the kinks sit at x2/x1 = 2/7 and 8/3; outside them ℓ
    // is a single coordinate and Σ vanishes, so the points stay strictly inside.
    let grid = EvalGrid::new(vec![
        vec![1.0, 0.5],
        vec![0.5, 1.0],
        vec![1.0, 1.0],
        vec![0.6, 0.9],
        vec![1.0, 0.7],
        vec![0.8, 1.0],
    ])
    .unwrap();
    let (n, k, reps) = (20_000, 200, 10_000);
    for theta in [[0.5, 0.5], [0.8, 0.3]] {
        let b = model.b_matrix(&theta).unwrap();
        let truth: Vec<f64> = grid.points().iter().map(|x| stdf(&model, &theta, x).unwrap()).collect();
        let draws: Vec<Vec<f64>> = (0..reps as u64)
            .into_par_iter()
            .map(|r| {
                let data = sim::sample_maxlinear(&b, n, 1_000 + r).unwrap();
                let est = estimate_on_grid(&ranks(&data), k, &grid, EstimatorKind::Empirical).unwrap();
                est.values
                    .iter()
                    .zip(&truth)
                    .map(|(a, t)| (k as f64).sqrt() * (a - t))
                    .collect()
            })
            .collect();
        let q = grid.q();
        let mean: Vec<f64> = (0..q)
            .map(|a| draws.iter().map(|d| d[a]).sum::<f64>() / reps as f64)
            .collect();
        let sigma = compute_sigma(&model, &theta, &grid).unwrap();
        let mut worst_z: f64 = 0.0;
        let mut worst_abs: f64 = 0.0;
        for a in 0..q {
            for c in a..q {
                let prods: Vec<f64> = draws.iter().map(|d| (d[a] - mean[a]) * (d[c] - mean[c])).collect();
                let cov = prods.iter().sum::<f64>() / (reps - 1) as f64;
                let var = prods.iter().map(|p| (p - cov).powi(2)).sum::<f64>() / (reps - 1) as f64;
                let se = (var / reps as f64).sqrt();
                let diff = (sigma[(a, c)] - cov).abs();
                worst_abs = worst_abs.max(diff);
                if se > 0.0 {
                    worst_z = worst_z.max(diff / se);
                }
            }
        }
        let name = format!("Σ gate max-linear d=2 r=2 θ=({}, {})", theta[0], theta[1]);
        if sigma.abs().max() < tol::SIGMA_DEGENERATE_ABS {
            // identical rows: complete dependence, both covariances vanish
            report.record(
                "3",
                name,
                worst_abs < tol::SIGMA_DEGENERATE_ABS,
                true,
                format!("degenerate, max |Σ − Σ̂| = {worst_abs:.2e}"),
            );
        } else {
            report.record(
                "3",
                name,
                worst_z <= tol::SIGMA_SE,
                true,
                format!("max |Σ − Σ̂|/se = {worst_z:.2} over {} entries", q * (q + 1) / 2),
            );
        }
    }
}

/// Projection by cyclic coordinate descent, run to a fixed point.
fn coordinate_descent(y: &[f64], m: &DMatrix<f64>, tags: &[ConeTag]) -> Vec<f64> {
    let n = y.len();
    let mut x = vec![0.0; n];
    for _ in 0..200_000 {
        let mut moved: f64 = 0.0;
        for i in 0..n {
            // minimize over x_i with the others held fixed
            let off: f64 = (0..n).filter(|&j| j != i).map(|j| m[(i, j)] * (x[j] - y[j])).sum();
            let mut v = y[i] - off / m[(i, i)];
            match tags[i] {
                ConeTag::Nonneg => v = v.max(0.0),
                ConeTag::Nonpos => v = v.min(0.0),
                ConeTag::Free => {}
            }
            moved = moved.max((v - x[i]).abs());
            x[i] = v;
        }
        if moved < 1e-15 {
            break;
        }
    }
    x
}

fn cone_oracle(report: &mut Report) {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut worst_match, mut worst_kkt): (f64, f64) = (0.0, 0.0);
    let instances = 10_000;
    for i in 0..instances {
        let c = 1 + i % 4;
        let a = DMatrix::from_fn(c, c, |_, _| rng.random_range(-1.0..1.0));
        let m = &a * a.transpose() + DMatrix::identity(c, c) * 0.3;
        let tags: Vec<ConeTag> = (0..c)
            .map(|_| match rng.random_range(0..5) {
                0 => ConeTag::Free,
                1 | 2 => ConeTag::Nonpos,
                _ => ConeTag::Nonneg,
            })
            .collect();
        let y: Vec<f64> = (0..c).map(|_| rng.random_range(-2.0..2.0)).collect();
        let p = project_cone(&y, &m, &tags).unwrap();
        let oracle = coordinate_descent(&y, &m, &tags);
        for j in 0..c {
            worst_match = worst_match.max((p.lambda[j] - oracle[j]).abs());
        }
        // KKT: gradient M(λ − y) has the right sign and is complementary
        for j in 0..c {
            let g: f64 = (0..c).map(|l| m[(j, l)] * (p.lambda[l] - y[l])).sum();
            let lam = p.lambda[j];
            let viol = match tags[j] {
                ConeTag::Free => g.abs(),
                ConeTag::Nonneg => (-lam).max(-g).max((lam * g).abs()).max(0.0),
                ConeTag::Nonpos => lam.max(g).max((lam * g).abs()).max(0.0),
            };
            worst_kkt = worst_kkt.max(viol);
        }
    }
    report.record(
        "4",
        "cone projection vs coordinate descent",
        worst_match <= tol::CONE_MATCH,
        true,
        format!("max |Δλ| = {worst_match:.1e} over {instances} instances"),
    );
    report.record(
        "4",
        "cone projection KKT",
        worst_kkt <= tol::CONE_KKT,
        true,
        format!("max violation {worst_kkt:.1e}"),
    );
}

fn quantiles(report: &mut Report) {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let draws = 1_000_000;
    for c in 1..=3usize {
        let (q, p) = (6, 4);
        let a = DMatrix::from_fn(q, q, |_, _| rng.random_range(-1.0..1.0));
        let sigma = &a * a.transpose() + DMatrix::identity(q, q) * 0.2;
        let ldot = DMatrix::from_fn(q, p, |_, _| rng.random_range(-1.0..1.0));
        let omega = sigma.clone().try_inverse().unwrap();
        let cone = Cone::free(p, (0..c).collect()).unwrap();
        let spec = from_parts(ldot, sigma, Some(omega), cone, 1.0).unwrap();
        let cv = sample_limit(&spec, draws, 10 + c as u64).unwrap().critical_value(0.05);
        let truth = ChiSquared::new(c as f64).unwrap().inverse_cdf(0.95);
        report.record(
            "5",
            format!("free cone, Ω = Σ⁻¹, c={c}: χ² 0.95 quantile"),
            ((cv - truth) / truth).abs() <= tol::QUANTILE_REL,
            true,
            format!("{cv:.4} vs {truth:.4}"),
        );
    }
    let one = DMatrix::identity(1, 1);
    let cone = Cone::new(1, vec![0], vec![ConeTag::Nonneg]).unwrap();
    let spec = from_parts(one.clone(), one.clone(), None, cone, 1.0).unwrap();
    let cv = sample_limit(&spec, draws, 99).unwrap().critical_value(0.05);
    // ½δ₀ + ½χ²₁ exceeds x with probability 0.05 where F_χ²₁(x) = 0.9
    let truth = ChiSquared::new(1.0).unwrap().inverse_cdf(0.9);
    report.record(
        "5",
        "half line: ½δ₀ + ½χ²₁ 0.95 quantile",
        ((cv - truth) / truth).abs() <= tol::QUANTILE_REL,
        true,
        format!("{cv:.4} vs {truth:.4}"),
    );
}

fn families() -> Vec<(ModelSpec, Vec<f64>)> {
    vec![
        (ModelSpec::logistic(3).unwrap(), vec![0.6]),
        (
            ModelSpec::brown_resnick(vec![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]).unwrap(),
            vec![1.5, 1.2],
        ),
        (ModelSpec::max_linear(2, 3).unwrap(), vec![0.6, 0.1, 0.2, 0.5]),
        (
            ModelSpec::marshall_olkin(3, vec![vec![0], vec![1, 2], vec![0, 1, 2]]).unwrap(),
            vec![0.3, 0.25],
        ),
    ]
}

fn self_consistency(report: &mut Report) {
    for (model, theta) in families() {
        let grid = sim::grid_recipe(&model).unwrap();
        let values = grid.points().iter().map(|x| stdf(&model, &theta, x).unwrap()).collect();
        let lhat = StdfEstimate {
            values,
            k: 100,
            estimator_kind: EstimatorKind::Empirical,
        };
        let problem = WlsProblem::new(model.clone(), grid, lhat, 5000).unwrap();
        let fit = problem.fit(&FitOptions {
            limit: false,
            ..FitOptions::default()
        });
        let (pass, detail) = match fit {
            Ok(f) => {
                let err = f
                    .theta_hat
                    .iter()
                    .zip(&theta)
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max);
                (err <= tol::SELF_CONSISTENCY, format!("max |θ̂ − θ*| = {err:.1e}"))
            }
            Err(e) => (false, e.to_string()),
        };
        report.record(
            "6",
            format!("noise-free recovery, {}", model.family()),
            pass,
            true,
            detail,
        );
    }
}

/// `P(Bin(n, u) ≥ r)`, the Beta(r, n + 1 − r) distribution function.
fn beta_cdf_binomial(r: u32, n: u32, u: f64) -> f64 {
    let choose = |n: u32, i: u32| (0..i).fold(1.0, |acc, j| acc * (n - j) as f64 / (j + 1) as f64);
    (r..=n)
        .map(|i| choose(n, i) * u.powi(i as i32) * (1.0 - u).powi((n - i) as i32))
        .sum()
}

fn hand_oracles(report: &mut Report) {
    let como = RankMatrix::from_rows(&[vec![1, 1], vec![2, 2], vec![3, 3], vec![4, 4]]).unwrap();
    let anti = RankMatrix::from_rows(&[vec![1, 4], vec![2, 3], vec![3, 2], vec![4, 1]]).unwrap();
    let (n, k) = (4u32, 2usize);
    let x = [1.0, 1.0];
    let count = |rk: &RankMatrix| {
        (0..rk.n())
            .filter(|&i| (0..2).any(|j| rk.get(i, j) as f64 > n as f64 + 0.5 - k as f64 * x[j]))
            .count() as f64
            / k as f64
    };
    let beta_sum = |rk: &RankMatrix| {
        let u: Vec<f64> = x.iter().map(|v| 1.0 - k as f64 * v / n as f64).collect();
        let c: f64 = (0..rk.n())
            .map(|i| {
                (0..2)
                    .map(|j| beta_cdf_binomial(rk.get(i, j), n, u[j]))
                    .product::<f64>()
            })
            .sum::<f64>()
            / n as f64;
        n as f64 / k as f64 * (1.0 - c)
    };
    let mut worst: f64 = 0.0;
    for (rk, expected) in [(&como, 1.0), (&anti, 2.0)] {
        let e = empirical_stdf(rk, k, &x).unwrap();
        worst = worst.max((e - expected).abs()).max((e - count(rk)).abs());
        worst = worst.max((beta_stdf(rk, k, &x).unwrap() - beta_sum(rk)).abs());
    }
    report.record(
        "6",
        "n=4, k=2 hand oracles (empirical and beta)",
        worst <= tol::HAND_ORACLE,
        true,
        format!("max deviation {worst:.1e}"),
    );
}

fn random_theta(model: &ModelSpec, rng: &mut ChaCha8Rng) -> Vec<f64> {
    match model.family() {
        Family::Logistic => vec![rng.random_range(0.05..1.0)],
        Family::BrownResnick => vec![rng.random_range(0.2..5.0), rng.random_range(0.1..2.0)],
        Family::MaxLinear => {
            let (d, r) = (model.d(), model.r());
            let raw = DMatrix::from_fn(d, r, |_, _| rng.random::<f64>());
            let b = DMatrix::from_fn(d, r, |j, t| raw[(j, t)] / raw.row(j).sum());
            model.theta_from_b(&b).unwrap()
        }
        Family::MarshallOlkin => {
            let raw: Vec<f64> = (0..model.r()).map(|_| rng.random_range(0.05..1.0)).collect();
            let s: f64 = raw.iter().sum();
            raw[..model.r() - 1].iter().map(|v| v / s).collect()
        }
    }
}

/// Random point; Brown–Resnick points have at most two positive coordinates.
fn random_point(model: &ModelSpec, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let d = model.d();
    let mut x: Vec<f64> = (0..d).map(|_| rng.random_range(0.0..2.0)).collect();
    if model.family() == Family::BrownResnick {
        let (a, b) = (rng.random_range(0..d), rng.random_range(0..d));
        for (j, v) in x.iter_mut().enumerate() {
            if j != a && j != b {
                *v = 0.0;
            }
        }
    }
    x
}

fn property_suite(report: &mut Report) {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for (model, _) in families() {
        let mut worst: f64 = 0.0;
        for _ in 0..1000 {
            let th = random_theta(&model, &mut rng);
            let l = |x: &[f64]| stdf(&model, &th, x).unwrap();
            let x = random_point(&model, &mut rng);
            let v = l(&x);
            let t = rng.random_range(0.1..10.0);
            let xt: Vec<f64> = x.iter().map(|a| a * t).collect();
            worst = worst.max((l(&xt) - t * v).abs() / (1.0 + t * v));
            let mx = x.iter().cloned().fold(0.0, f64::max);
            let sum: f64 = x.iter().sum();
            worst = worst.max(mx - v).max(v - sum);
            // convexity along a segment that keeps the support of x
            let y: Vec<f64> = x.iter().map(|a| a * rng.random_range(0.0..2.0)).collect();
            let mid: Vec<f64> = x.iter().zip(&y).map(|(a, b)| 0.5 * (a + b)).collect();
            worst = worst.max(l(&mid) - 0.5 * (v + l(&y)));
            for j in 0..model.d() {
                let mut e = vec![0.0; model.d()];
                e[j] = 1.0;
                worst = worst.max((l(&e) - 1.0).abs());
            }
        }
        report.record(
            "6",
            format!("stdf properties, {}", model.family()),
            worst <= tol::PROPERTY,
            true,
            format!("max violation {worst:.1e} over 1000 draws"),
        );
    }
}

fn brown_resnick(report: &mut Report, reps: usize) {
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut worst: f64 = 0.0;
    for (rho, alpha) in [(1.0, 2.0), (1.5, 1.0)] {
        let locs = [[0.0, 0.0], [1.0, 0.0], [2.0, 1.0]];
        let (data, capped) = sim::BrownResnickSampler::new(&locs, rho, alpha)
            .unwrap()
            .sample(100_000, 17, 1000)
            .unwrap();
        assert_eq!(capped, 0);
        let rk = ranks(&data);
        for (a, b) in [(0, 1), (0, 2), (1, 2)] {
            let h = ((locs[a][0] - locs[b][0]).powi(2) + (locs[a][1] - locs[b][1]).powi(2)).sqrt();
            let gamma = (h / rho).powf(alpha);
            let truth = 2.0 * normal.cdf((gamma / 2.0).sqrt());
            let pair = rk.select_columns(&[a, b]);
            let est = empirical_stdf(&pair, 1000, &[1.0, 1.0]).unwrap();
            worst = worst.max((est - truth).abs());
        }
    }
    report.record(
        "7",
        "Brown–Resnick pairwise extremal coefficients",
        worst <= tol::EXTREMAL_COEFFICIENT,
        true,
        format!("max deviation {worst:.4}"),
    );

    let d = level_design(
        designs::brown_resnick(3, 2),
        25,
        EstimatorKind::Beta,
        StatisticKind::Wald,
        reps,
    )
    .expect("valid design");
    let table = run_level(&d);
    report.level(
        "7",
        "BR d=6 Wald k=25 beta",
        table
            .as_ref()
            .and_then(|t| t.find("BR d=6", 25, EstimatorKind::Beta, Some(StatisticKind::Wald), None)),
        tol::BR_D6_BETA_LEVEL,
    );

    let power_reps = (reps / 5).max(20);
    let mut m1 = designs::m1();
    m1.ks = vec![50];
    m1.estimators = vec![EstimatorKind::Empirical];
    m1.replicates = power_reps;
    let (alts, axes) = designs::m1_power();
    let mut br = designs::brown_resnick(3, 2);
    br.ks = vec![50];
    br.estimators = vec![EstimatorKind::Beta];
    br.replicates = power_reps;
    let (br_alts, br_axes) = designs::brown_resnick_power();
    for (design, alts, axes) in [(m1, alts, axes), (br, br_alts, br_axes)] {
        let name = format!("{} power monotone away from the null", design.name);
        match sim::run_power(&design, &alts, &axes) {
            Ok(table) => {
                let bad = sim::power_monotonicity_violations(&table, &design.theta0);
                let far = table.cells.iter().map(|c| c.values[0]).fold(0.0, f64::max);
                report.record(
                    "7",
                    name,
                    bad.is_empty(),
                    false,
                    if bad.is_empty() {
                        format!(
                            "{} cells, {power_reps} replicates, max power {far:.1}%",
                            table.cells.len()
                        )
                    } else {
                        bad.join("; ")
                    },
                );
            }
            Err(e) => report.record("7", name, false, false, e.to_string()),
        }
    }
}

fn stocks_arithmetic(report: &mut Report) {
    // the published loadings, rows DAX and CAC40
    let b: [[f64; 4]; 2] = [[0.41, 0.14, 0.43, 0.03], [0.43, 0.44, 0.13, 0.00]];
    let l11: f64 = (0..4).map(|t| b[0][t].max(b[1][t])).sum();
    let via_crate = stocks::maxlinear_stdf(&DMatrix::from_row_slice(2, 4, &b.concat()), &[1.0, 1.0]);
    let pass = (l11 - 1.33).abs() <= tol::PRINTED_MATRIX
        && (2.0 - l11 - 0.67).abs() <= tol::PRINTED_MATRIX
        && (via_crate - l11).abs() < 1e-12;
    report.record(
        "8",
        "returns: ℓ(1,1) and χ from the printed loadings (no bundled data; see README recipe)",
        pass,
        true,
        format!("ℓ(1,1) = {l11:.4}, χ = {:.4}", 2.0 - l11),
    );
}

fn main() -> ExitCode {
    let reps = replicates();
    let mut report = Report::default();
    let sections: [(&str, Box<dyn Fn(&mut Report)>); 8] = [
        ("cone", Box::new(cone_oracle)),
        ("quantiles", Box::new(quantiles)),
        ("self-consistency", Box::new(self_consistency)),
        ("hand oracles", Box::new(hand_oracles)),
        ("properties", Box::new(property_suite)),
        ("returns", Box::new(stocks_arithmetic)),
        ("sigma", Box::new(sigma_gate)),
        ("levels", Box::new(move |r: &mut Report| table_levels(r, reps))),
    ];
    for (name, run) in sections.iter() {
        let t = Instant::now();
        run(&mut report);
        println!("      ({name}: {:.1} s)", t.elapsed().as_secs_f64());
    }
    let t = Instant::now();
    brown_resnick(&mut report, reps);
    println!("      (brown-resnick: {:.1} s)", t.elapsed().as_secs_f64());

    let passed = report.rows.iter().filter(|o| o.pass).count();
    let gating_failures: Vec<&Outcome> = report.rows.iter().filter(|o| o.gating && !o.pass).collect();
    println!(
        "acceptance: {passed}/{} passed, {reps} replicates per level cell",
        report.rows.len()
    );
    for o in report.rows.iter().filter(|o| !o.pass && !o.gating) {
        println!("      reported, not gating: [{}] {}", o.id, o.name);
    }
    if gating_failures.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
