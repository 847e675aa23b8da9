//! Special functions: normal distribution, Beta(r, n+1-r) distribution tables
//! and low-dimensional multivariate normal probabilities.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use statrs::function::gamma::ln_gamma;

/// Standard normal cumulative distribution function.
pub fn norm_cdf(x: f64) -> f64 {
    if x == f64::INFINITY {
        return 1.0;
    }
    if x == f64::NEG_INFINITY {
        return 0.0;
    }
    0.5 * libm::erfc(-x * FRAC_1_SQRT_2)
}

/// Standard normal density.
pub fn norm_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

/// Inverse standard normal CDF via Acklam's rational approximation plus one
/// Halley refinement step.
pub fn norm_quantile(p: f64) -> f64 {
    if p <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if p >= 1.0 {
        return f64::INFINITY;
    }
    const A: [f64; 6] = [
        -3.969_683_028_665_376e1,
        2.209_460_984_245_205e2,
        -2.759_285_104_469_687e2,
        1.383_577_518_672_69e2,
        -3.066_479_806_614_716e1,
        2.506_628_277_459_239,
    ];
    const B: [f64; 5] = [
        -5.447_609_879_822_406e1,
        1.615_858_368_580_409e2,
        -1.556_989_798_598_866e2,
        6.680_131_188_771_972e1,
        -1.328_068_155_288_572e1,
    ];
    const C: [f64; 6] = [
        -7.784_894_002_430_293e-3,
        -3.223_964_580_411_365e-1,
        -2.400_758_277_161_838,
        -2.549_732_539_343_734,
        4.374_664_141_464_968,
        2.938_163_982_698_783,
    ];
    const D: [f64; 4] = [
        7.784_695_709_041_462e-3,
        3.224_671_290_700_398e-1,
        2.445_134_137_142_996,
        3.754_408_661_907_416,
    ];
    let plow = 0.02425;
    let x = if p < plow {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - plow {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    };
    let e = norm_cdf(x) - p;
    let u = e * (2.0 * PI).sqrt() * (0.5 * x * x).exp();
    x - u / (1.0 + 0.5 * x * u)
}

/// Distribution functions `F_{n,r}(u)` of Beta(r, n+1-r), r = 1..n, at a fixed `u`.
///
/// For integer `r`, `F_{n,r}(u) = P[Bin(n, u) >= r]`, so the whole family at one
/// `u` follows from a single pass over the binomial probabilities. Both the
/// distribution function and its complement are kept so that neither side
/// suffers cancellation.
#[derive(Debug, Clone)]
pub struct BetaCdfTable {
    /// `cdf[r - 1] = F_{n,r}(u)`.
    cdf: Vec<f64>,
    /// `sf[r - 1] = 1 - F_{n,r}(u)`.
    sf: Vec<f64>,
}

impl BetaCdfTable {
    pub fn new(n: usize, u: f64) -> Self {
        assert!(n >= 1);
        let pmf = binomial_pmf(n, u.clamp(0.0, 1.0));
        // cdf[r-1] = sum_{s >= r} pmf[s]
        let mut cdf = vec![0.0; n];
        let mut acc = 0.0;
        for r in (1..=n).rev() {
            acc += pmf[r];
            cdf[r - 1] = acc.min(1.0);
        }
        // sf[r-1] = sum_{s < r} pmf[s]
        let mut sf = vec![0.0; n];
        let mut acc = 0.0;
        for r in 1..=n {
            acc += pmf[r - 1];
            sf[r - 1] = acc.min(1.0);
        }
        Self { cdf, sf }
    }

    pub fn cdf(&self, r: u32) -> f64 {
        self.cdf[r as usize - 1]
    }

    pub fn sf(&self, r: u32) -> f64 {
        self.sf[r as usize - 1]
    }
}

/// Binomial(n, u) probabilities for s = 0..=n, normalized to sum to one.
fn binomial_pmf(n: usize, u: f64) -> Vec<f64> {
    let mut pmf = vec![0.0; n + 1];
    if u <= 0.0 {
        pmf[0] = 1.0;
        return pmf;
    }
    if u >= 1.0 {
        pmf[n] = 1.0;
        return pmf;
    }
    let nf = n as f64;
    let mode = (((nf + 1.0) * u).floor() as usize).min(n);
    let log_mode = ln_gamma(nf + 1.0) - ln_gamma(mode as f64 + 1.0) - ln_gamma(nf - mode as f64 + 1.0)
        + mode as f64 * u.ln()
        + (nf - mode as f64) * (-u).ln_1p();
    pmf[mode] = log_mode.exp();
    let odds = u / (1.0 - u);
    for s in mode..n {
        pmf[s + 1] = pmf[s] * (nf - s as f64) / (s as f64 + 1.0) * odds;
        if pmf[s + 1] == 0.0 {
            break;
        }
    }
    for s in (1..=mode).rev() {
        pmf[s - 1] = pmf[s] * s as f64 / ((nf - s as f64 + 1.0) * odds);
        if pmf[s - 1] == 0.0 {
            break;
        }
    }
    let total: f64 = pmf.iter().sum();
    for p in &mut pmf {
        *p /= total;
    }
    pmf
}

/// Multivariate normal probability `P[X <= upper]` for a zero-mean Gaussian
/// vector with covariance matrix `cov`, in at most four dimensions.
///
/// Two dimensions use Genz's bivariate algorithm. Higher dimensions condition
/// on the first Cholesky variable and integrate it out by adaptive Simpson
/// quadrature. Positive semidefinite matrices are allowed: a variable with a
/// vanishing conditional variance becomes an exact linear constraint.
pub fn mvn_cdf(upper: &[f64], cov: &[Vec<f64>]) -> f64 {
    let m = upper.len();
    assert_eq!(cov.len(), m);
    assert!(m <= 4, "mvn_cdf supports at most four dimensions");
    if m == 0 {
        return 1.0;
    }
    let chol = semidefinite_cholesky(cov);
    mvn_chol(upper, &chol).clamp(0.0, 1.0)
}

const PIVOT_TOL: f64 = 1e-12;
const Z_MAX: f64 = 9.0;

/// `P[L z <= a]` for standard normal `z` and lower-triangular `L`.
fn mvn_chol(a: &[f64], l: &[Vec<f64>]) -> f64 {
    let m = a.len();
    match m {
        0 => 1.0,
        1 => {
            if l[0][0] > PIVOT_TOL {
                norm_cdf(a[0] / l[0][0])
            } else if a[0] >= 0.0 {
                1.0
            } else {
                0.0
            }
        }
        2 => bvn_chol(a, l),
        _ => {
            let c = l[0][0];
            let sub: Vec<Vec<f64>> = l[1..].iter().map(|row| row[1..].to_vec()).collect();
            if c <= PIVOT_TOL {
                // column of a zero pivot is zero as well
                return if a[0] >= 0.0 { mvn_chol(&a[1..], &sub) } else { 0.0 };
            }
            let hi = (a[0] / c).min(Z_MAX);
            if hi <= -Z_MAX {
                return 0.0;
            }
            let mut shifted = vec![0.0; m - 1];
            let mut f = |z: f64| {
                for i in 1..m {
                    shifted[i - 1] = a[i] - l[i][0] * z;
                }
                norm_pdf(z) * mvn_chol(&shifted, &sub)
            };
            adaptive_simpson(&mut f, -Z_MAX, hi, 1e-11)
        }
    }
}

fn bvn_chol(a: &[f64], l: &[Vec<f64>]) -> f64 {
    let (c1, l21, c2) = (l[0][0], l[1][0], l[1][1]);
    let sd2 = (l21 * l21 + c2 * c2).sqrt();
    if c1 <= PIVOT_TOL {
        let first = if a[0] >= 0.0 { 1.0 } else { 0.0 };
        return first * mvn_chol(&a[1..], &[vec![sd2]]);
    }
    if c2 <= PIVOT_TOL {
        // X2 = l21 z on the same normal variable: an interval for z
        let mut lo = f64::NEG_INFINITY;
        let mut hi = a[0] / c1;
        if l21 > PIVOT_TOL {
            hi = hi.min(a[1] / l21);
        } else if l21 < -PIVOT_TOL {
            lo = a[1] / l21;
        } else if a[1] < 0.0 {
            return 0.0;
        }
        return if hi > lo { norm_cdf(hi) - norm_cdf(lo) } else { 0.0 };
    }
    bvn_lower(a[0] / c1, a[1] / sd2, l21 / sd2)
}

/// `P[X <= h, Y <= k]` for standard bivariate normal variables with
/// correlation `r`.
pub fn bvn_lower(h: f64, k: f64, r: f64) -> f64 {
    bvn_upper(-h, -k, r)
}

/// `P[X > h, Y > k]` following Genz (2004), accurate to about 1e-15.
fn bvn_upper(h: f64, k: f64, r: f64) -> f64 {
    if h == f64::INFINITY || k == f64::INFINITY {
        return 0.0;
    }
    if h == f64::NEG_INFINITY {
        return if k == f64::NEG_INFINITY { 1.0 } else { norm_cdf(-k) };
    }
    if k == f64::NEG_INFINITY {
        return norm_cdf(-h);
    }
    if r == 0.0 {
        return norm_cdf(-h) * norm_cdf(-k);
    }
    const W6: [f64; 3] = [
        0.171_324_492_379_170_5,
        0.360_761_573_048_138_4,
        0.467_913_934_572_690_4,
    ];
    const X6: [f64; 3] = [0.932_469_514_203_152_2, 0.661_209_386_466_264_7, 0.238_619_186_083_197];
    const W12: [f64; 6] = [
        0.047_175_336_386_511_77,
        0.106_939_325_995_318_3,
        0.160_078_328_543_346_4,
        0.203_167_426_723_065_9,
        0.233_492_536_538_354_7,
        0.249_147_045_813_402_9,
    ];
    const X12: [f64; 6] = [
        0.981_560_634_246_719_1,
        0.904_117_256_370_475,
        0.769_902_674_194_305,
        0.587_317_954_286_617_1,
        0.367_831_498_998_180_2,
        0.125_233_408_511_469_2,
    ];
    const W20: [f64; 10] = [
        0.017_614_007_139_152_12,
        0.040_601_429_800_386_94,
        0.062_672_048_334_109_06,
        0.083_276_741_576_704_75,
        0.101_930_119_817_240_4,
        0.118_194_531_961_518_4,
        0.131_688_638_449_176_6,
        0.142_096_109_318_382_1,
        0.149_172_986_472_603_7,
        0.152_753_387_130_725_9,
    ];
    const X20: [f64; 10] = [
        0.993_128_599_185_094_9,
        0.963_971_927_277_913_8,
        0.912_234_428_251_325_9,
        0.839_116_971_822_218_8,
        0.746_331_906_460_150_8,
        0.636_053_680_726_515,
        0.510_867_001_950_827_1,
        0.373_706_088_715_419_6,
        0.227_785_851_141_645_1,
        0.076_526_521_133_497_33,
    ];
    let (w, x): (&[f64], &[f64]) = if r.abs() < 0.3 {
        (&W6, &X6)
    } else if r.abs() < 0.75 {
        (&W12, &X12)
    } else {
        (&W20, &X20)
    };
    let tp = 2.0 * PI;
    let mut k = k;
    let mut hk = h * k;
    let mut bvn = 0.0;
    if r.abs() < 0.925 {
        let hs = (h * h + k * k) / 2.0;
        let asr = r.asin() / 2.0;
        for (&wi, &xi) in w.iter().zip(x) {
            for node in [1.0 - xi, 1.0 + xi] {
                let sn = (asr * node).sin();
                bvn += wi * ((sn * hk - hs) / (1.0 - sn * sn)).exp();
            }
        }
        bvn = bvn * asr / tp + norm_cdf(-h) * norm_cdf(-k);
    } else {
        if r < 0.0 {
            k = -k;
            hk = -hk;
        }
        if r.abs() < 1.0 {
            let as_ = 1.0 - r * r;
            let mut a = as_.sqrt();
            let bs = (h - k) * (h - k);
            let c = (4.0 - hk) / 8.0;
            let d = (12.0 - hk) / 80.0;
            let asr = -(bs / as_ + hk) / 2.0;
            if asr > -100.0 {
                bvn = a * asr.exp() * (1.0 - c * (bs - as_) * (1.0 - d * bs / 5.0) / 3.0 + c * d * as_ * as_ / 5.0);
            }
            if hk > -100.0 {
                let b = bs.sqrt();
                let sp = tp.sqrt() * norm_cdf(-b / a);
                bvn -= (-hk / 2.0).exp() * sp * b * (1.0 - c * bs * (1.0 - d * bs / 5.0) / 3.0);
            }
            a /= 2.0;
            for (&wi, &xi) in w.iter().zip(x) {
                for node in [1.0 - xi, 1.0 + xi] {
                    let xs = (a * node) * (a * node);
                    let asr = -(bs / xs + hk) / 2.0;
                    if asr > -100.0 {
                        let sp = 1.0 + c * xs * (1.0 + d * xs);
                        let rs = (1.0 - xs).sqrt();
                        let ep = (-hk * xs / (2.0 * (1.0 + rs) * (1.0 + rs))).exp() / rs;
                        bvn += a * wi * asr.exp() * (ep - sp);
                    }
                }
            }
            bvn = -bvn / tp;
        }
        if r > 0.0 {
            bvn += norm_cdf(-h.max(k));
        } else if h >= k {
            bvn = -bvn;
        } else {
            let span = if h < 0.0 {
                norm_cdf(k) - norm_cdf(h)
            } else {
                norm_cdf(-h) - norm_cdf(-k)
            };
            bvn = span - bvn;
        }
    }
    bvn.clamp(0.0, 1.0)
}

fn adaptive_simpson(f: &mut impl FnMut(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    let fa = f(a);
    let fb = f(b);
    let m = 0.5 * (a + b);
    let fm = f(m);
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    simpson_step(f, a, b, fa, fm, fb, whole, tol, 50)
}

#[allow(clippy::too_many_arguments)]
fn simpson_step(
    f: &mut impl FnMut(f64) -> f64,
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    depth: u32,
) -> f64 {
    let m = 0.5 * (a + b);
    let lm = 0.5 * (a + m);
    let rm = 0.5 * (m + b);
    let flm = f(lm);
    let frm = f(rm);
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let diff = left + right - whole;
    // the first few levels are always split so narrow features are not missed
    if depth == 0 || (depth < 46 && diff.abs() <= 15.0 * tol) {
        return left + right + diff / 15.0;
    }
    simpson_step(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1)
        + simpson_step(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
}

/// Lower-triangular factor of a positive semidefinite matrix; pivots below
/// `1e-12` are set to zero.
fn semidefinite_cholesky(a: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let m = a.len();
    let mut l = vec![vec![0.0; m]; m];
    for i in 0..m {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i][k] * l[j][k]).sum();
            if i == j {
                let v = a[i][i] - s;
                l[i][i] = if v > PIVOT_TOL { v.sqrt() } else { 0.0 };
            } else if l[j][j] > 0.0 {
                l[i][j] = (a[i][j] - s) / l[j][j];
            }
        }
    }
    l
}

#[cfg(test)]
mod tests {
    use super::*;
    use statrs::function::beta::beta_reg;

    #[test]
    fn normal_values() {
        assert!((norm_cdf(0.0) - 0.5).abs() < 1e-16);
        assert!((norm_cdf(1.959_963_984_540_054) - 0.975).abs() < 1e-13);
        assert!((norm_cdf(-8.0) - 6.220_960_574_271_785e-16).abs() < 1e-26);
        for &p in &[1e-10, 0.001, 0.3, 0.5, 0.9, 0.999_999] {
            assert!((norm_cdf(norm_quantile(p)) - p).abs() < 1e-14 * p.max(1e-3));
        }
    }

    #[test]
    fn beta_table_matches_incomplete_beta() {
        for &(n, u) in &[
            (4usize, 0.3),
            (50, 0.98),
            (5000, 0.995),
            (5000, 0.5),
            (7, 0.0),
            (7, 1.0),
        ] {
            let t = BetaCdfTable::new(n, u);
            for r in [1usize, 2, n / 2 + 1, n.saturating_sub(1).max(1), n] {
                let exact = beta_reg(r as f64, (n + 1 - r) as f64, u);
                assert!(
                    (t.cdf(r as u32) - exact).abs() < 1e-12,
                    "n={n} u={u} r={r}: {} vs {exact}",
                    t.cdf(r as u32)
                );
                assert!((t.cdf(r as u32) + t.sf(r as u32) - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn bernstein_identity() {
        // sum_r F_{n,r}(u) = n u
        for &(n, u) in &[(10usize, 0.37), (1000, 0.99), (5000, 0.01)] {
            let t = BetaCdfTable::new(n, u);
            let s: f64 = (1..=n as u32).map(|r| t.cdf(r)).sum();
            assert!((s - n as f64 * u).abs() < 1e-9 * n as f64);
        }
    }

    fn simpson(f: impl Fn(f64) -> f64, lo: f64, hi: f64) -> f64 {
        let steps = 20_000;
        let dz = (hi - lo) / steps as f64;
        let mut acc = f(lo) + f(hi);
        for i in 1..steps {
            acc += if i % 2 == 1 { 4.0 } else { 2.0 } * f(lo + i as f64 * dz);
        }
        acc * dz / 3.0
    }

    fn bvn_by_quadrature(h: f64, k: f64, rho: f64) -> f64 {
        // P[X <= h, Y <= k] = int_{-inf}^h phi(z) Phi((k - rho z)/sqrt(1-rho^2)) dz
        let s = (1.0 - rho * rho).sqrt();
        simpson(|z| norm_pdf(z) * norm_cdf((k - rho * z) / s), -10.0, h)
    }

    #[test]
    fn bivariate_normal_against_quadrature() {
        for &(h, k, rho) in &[
            (0.3, -0.2, 0.5),
            (1.0, 1.5, -0.7),
            (-0.5, 0.4, 0.95),
            (2.0, 0.0, 0.0),
            (0.7, -1.1, -0.97),
            (-1.3, 0.2, 0.2),
        ] {
            let cov = vec![vec![1.0, rho], vec![rho, 1.0]];
            let v = mvn_cdf(&[h, k], &cov);
            let q = bvn_by_quadrature(h, k, rho);
            assert!((v - q).abs() < 1e-10, "{h} {k} {rho}: {v} vs {q}");
        }
        let v = mvn_cdf(&[0.0, 0.0], &[vec![1.0, 0.5], vec![0.5, 1.0]]);
        assert!((v - (0.25 + (0.5f64).asin() / (2.0 * PI))).abs() < 1e-14);
        // covariance scaling
        let v = mvn_cdf(&[0.6, -0.4], &[vec![4.0, -1.2], vec![-1.2, 1.0]]);
        assert!((v - bvn_by_quadrature(0.3, -0.4, -0.6)).abs() < 1e-10);
    }

    #[test]
    fn orthant_probabilities() {
        // P[X1<=0, X2<=0, X3<=0] = 1/8 + (asin r12 + asin r13 + asin r23)/(4 pi)
        let r = [0.3, -0.2, 0.6];
        let cov = vec![vec![1.0, r[0], r[1]], vec![r[0], 1.0, r[2]], vec![r[1], r[2], 1.0]];
        let exact = 0.125 + r.iter().map(|x: &f64| x.asin()).sum::<f64>() / (4.0 * PI);
        assert!((mvn_cdf(&[0.0; 3], &cov) - exact).abs() < 1e-9);
        // exchangeable correlation 1/2: orthant probability 1/(m+1)
        for m in 3..=4 {
            let cov: Vec<Vec<f64>> = (0..m)
                .map(|i| (0..m).map(|j| if i == j { 1.0 } else { 0.5 }).collect())
                .collect();
            let v = mvn_cdf(&vec![0.0; m], &cov);
            assert!((v - 1.0 / (m as f64 + 1.0)).abs() < 1e-8, "{m}: {v}");
        }
    }

    #[test]
    fn singular_covariances() {
        let cov = vec![vec![1.0, 1.0], vec![1.0, 1.0]];
        assert!((mvn_cdf(&[0.5, 1.0], &cov) - norm_cdf(0.5)).abs() < 1e-15);
        let cov = vec![vec![1.0, -1.0], vec![-1.0, 1.0]];
        assert!((mvn_cdf(&[0.5, 1.0], &cov) - (norm_cdf(0.5) - norm_cdf(-1.0))).abs() < 1e-15);
        assert_eq!(mvn_cdf(&[-0.5, -1.0], &cov), 0.0);
        // (Z1, Z2, (Z1 + Z2)/sqrt 2) has rank two
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let cov = vec![vec![1.0, 0.0, s], vec![0.0, 1.0, s], vec![s, s, 1.0]];
        assert!((mvn_cdf(&[0.0; 3], &cov) - 0.25).abs() < 1e-10);
        // P[Z1 <= 0, Z2 <= 0, Z1 + Z2 <= c sqrt 2]: for z1 <= b = c sqrt 2 the
        // binding bound on z2 is 0, above it b - z1
        let c = -0.5;
        let b = c * std::f64::consts::SQRT_2;
        let exact = simpson(|z| norm_pdf(z) * 0.5, -10.0, b) + simpson(|z| norm_pdf(z) * norm_cdf(b - z), b, 0.0);
        let v = mvn_cdf(&[0.0, 0.0, c], &cov);
        assert!((v - exact).abs() < 1e-9, "{v} vs {exact}");
    }
}
