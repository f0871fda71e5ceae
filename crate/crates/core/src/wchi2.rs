//! Law of T = sum_l lambda_l chi2_l(1) with independent components.
//!
//! The CDF inverts the characteristic function with Imhof's integral
//! P(T <= t) = 1/2 - (1/pi) int_0^inf sin(theta(u)) / (u rho(u)) du,
//! theta(u) = 1/2 sum atan(lambda u) - t u / 2, rho(u) = prod (1 + lambda^2 u^2)^(1/4).
//! The integral is truncated at U with a two-term integration-by-parts tail
//! correction whose remainder is bounded analytically.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};

use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{Error, Result};

/// Negative eigenvalues above `-CLAMP_TOL * max` are set to zero.
pub const CLAMP_TOL: f64 = 1e-10;
/// Eigenvalues below `DROP_TOL * max` are dropped before integration.
pub const DROP_TOL: f64 = 1e-12;
/// Accuracy above which the CDF reports an integration failure.
pub const CDF_ACCURACY: f64 = 1e-6;
/// Target for the truncation remainder (on the probability scale).
const TAIL_TOL: f64 = 1e-7;
/// Absolute tolerance for each quadrature panel.
const PANEL_TOL: f64 = 1e-10;
const MAX_DEPTH: u32 = 20;
const MAX_PANELS: usize = 200_000;

/// A nonnegative spectrum with at least one positive entry.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedChiSq {
    lambdas: Vec<f64>,
    /// Number of small negative inputs set to zero.
    pub clamped: usize,
    /// Number of entries dropped as negligible.
    pub dropped: usize,
}

impl WeightedChiSq {
    /// Apply the clamp and drop policy and validate.
    pub fn new(raw: &[f64]) -> Result<Self> {
        if raw.iter().any(|l| !l.is_finite()) {
            return Err(Error::InvalidSpec("eigenvalues must be finite".into()));
        }
        let max = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if !(max > 0.0) {
            return Err(Error::InvalidSpec("weighted chi-squared law needs a positive eigenvalue".into()));
        }
        let mut clamped = 0;
        let mut dropped = 0;
        let mut lambdas = Vec::with_capacity(raw.len());
        for &l in raw {
            if l < -CLAMP_TOL * max {
                return Err(Error::NegativeEigenvalue { value: l });
            }
            if l < 0.0 {
                clamped += 1;
            } else if l < DROP_TOL * max {
                dropped += 1;
            } else {
                lambdas.push(l);
            }
        }
        lambdas.sort_by(|a, b| b.total_cmp(a));
        Ok(WeightedChiSq { lambdas, clamped, dropped })
    }

    /// Retained eigenvalues in descending order.
    pub fn lambdas(&self) -> &[f64] {
        &self.lambdas
    }

    pub fn mean(&self) -> f64 {
        self.lambdas.iter().sum()
    }

    /// P(T <= t).
    pub fn cdf(&self, t: f64) -> Result<f64> {
        if !t.is_finite() {
            return Err(Error::InvalidSpec("cdf argument must be finite".into()));
        }
        if t <= 0.0 {
            return Ok(0.0);
        }
        let scale = self.lambdas[0];
        let l: Vec<f64> = self.lambdas.iter().map(|v| v / scale).collect();
        imhof(&l, t / scale)
    }

    /// Smallest t with P(T <= t) = p, to relative width 1e-9.
    pub fn quantile(&self, p: f64) -> Result<f64> {
        if !(p > 0.0 && p < 1.0) {
            return Err(Error::InvalidSpec(format!("quantile level {p} outside (0, 1)")));
        }
        let scale = self.lambdas[0];
        let l: Vec<f64> = self.lambdas.iter().map(|v| v / scale).collect();
        let f = |x: f64| imhof(&l, x).map(|c| c - p);
        // Start from the two-moment scaled chi-squared approximation.
        let s1: f64 = l.iter().sum();
        let s2: f64 = l.iter().map(|v| v * v).sum();
        let guess = ChiSquared::new(s1 * s1 / s2)
            .map(|c| c.inverse_cdf(p) * s2 / s1)
            .ok()
            .filter(|g| g.is_finite() && *g > 0.0)
            .unwrap_or(s1);
        let mut lo = guess;
        let mut f_lo = f(lo)?;
        let mut hi = guess;
        let mut f_hi = f_lo;
        let mut expansions = 0;
        while f_lo > 0.0 {
            hi = lo;
            f_hi = f_lo;
            lo *= 0.5;
            f_lo = f(lo)?;
            expansions += 1;
            if expansions > 1000 {
                return Err(Error::IntegrationFailure("quantile bracket did not close".into()));
            }
        }
        while f_hi < 0.0 {
            lo = hi;
            f_lo = f_hi;
            hi *= 1.5;
            f_hi = f(hi)?;
            expansions += 1;
            if expansions > 1000 {
                return Err(Error::IntegrationFailure("quantile bracket did not close".into()));
            }
        }
        if f_lo == 0.0 {
            return Ok(lo * scale);
        }
        // Illinois false position; bisect after three same-side updates.
        let mut side = 0i32;
        for _ in 0..300 {
            if hi - lo <= 1e-9 * hi {
                break;
            }
            let mut mid = (lo * f_hi - hi * f_lo) / (f_hi - f_lo);
            if !(mid > lo && mid < hi) || side.abs() >= 3 {
                mid = 0.5 * (lo + hi);
                side = 0;
            }
            let fm = f(mid)?;
            if fm == 0.0 {
                return Ok(mid * scale);
            }
            if fm < 0.0 {
                lo = mid;
                f_lo = fm;
                if side < 0 {
                    f_hi *= 0.5;
                }
                side = side.min(0) - 1;
            } else {
                hi = mid;
                f_hi = fm;
                if side > 0 {
                    f_lo *= 0.5;
                }
                side = side.max(0) + 1;
            }
        }
        Ok(0.5 * (lo + hi) * scale)
    }

    /// `count` seeded draws of sum_l lambda_l N_l^2.
    pub fn sample(&self, count: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        (0..count)
            .map(|_| {
                self.lambdas
                    .iter()
                    .map(|&l| {
                        let g: f64 = StandardNormal.sample(&mut rng);
                        l * g * g
                    })
                    .sum()
            })
            .collect()
    }
}

/// Empirical law from sorted draws; the fallback when integration fails.
#[derive(Debug, Clone)]
pub struct EmpiricalLaw {
    sorted: Vec<f64>,
}

impl EmpiricalLaw {
    pub fn from_draws(mut draws: Vec<f64>) -> Self {
        draws.sort_by(f64::total_cmp);
        EmpiricalLaw { sorted: draws }
    }

    pub fn cdf(&self, t: f64) -> f64 {
        self.sorted.partition_point(|&v| v <= t) as f64 / self.sorted.len() as f64
    }

    /// Type-7 linear interpolation quantile.
    pub fn quantile(&self, p: f64) -> f64 {
        let n = self.sorted.len();
        let h = (n - 1) as f64 * p.clamp(0.0, 1.0);
        let lo = h.floor() as usize;
        let hi = (lo + 1).min(n - 1);
        self.sorted[lo] + (h - lo as f64) * (self.sorted[hi] - self.sorted[lo])
    }
}

/// Kolmogorov distance between sorted draws and a continuous CDF.
///
/// With `grid >= draws.len()` the distance is exact. Otherwise the CDF is
/// evaluated at `grid` empirical quantiles and monotonicity of both functions
/// bounds the distance inside each cell, giving an upper bound that exceeds
/// the exact value by at most about 2 / grid.
pub fn ks_distance(sorted: &[f64], cdf: impl Fn(f64) -> Result<f64>, grid: usize) -> Result<f64> {
    let n = sorted.len();
    if n == 0 {
        return Ok(0.0);
    }
    let nf = n as f64;
    let mut d: f64 = 0.0;
    if grid >= n {
        for (i, &x) in sorted.iter().enumerate() {
            let f = cdf(x)?;
            d = d.max(f - i as f64 / nf).max((i + 1) as f64 / nf - f);
        }
        return Ok(d);
    }
    let m = grid.max(1);
    let mut prev_f = 0.0;
    let mut prev_e = 0.0;
    for j in 1..=m {
        let b = (j * n / m).max(1);
        let x = sorted[b - 1];
        let e = sorted.partition_point(|&v| v <= x) as f64 / nf;
        let f = cdf(x)?;
        d = d.max(f - prev_e).max(e - prev_f);
        prev_f = f;
        prev_e = e;
    }
    Ok(d.max(1.0 - prev_f))
}

struct Integrand<'a> {
    l: &'a [f64],
    x: f64,
}

impl Integrand<'_> {
    fn theta(&self, u: f64) -> f64 {
        0.5 * self.l.iter().map(|&l| (l * u).atan()).sum::<f64>() - 0.5 * self.x * u
    }

    fn log_rho(&self, u: f64) -> f64 {
        0.25 * self.l.iter().map(|&l| (l * l * u * u).ln_1p()).sum::<f64>()
    }

    fn eval(&self, u: f64) -> f64 {
        if u == 0.0 {
            return 0.5 * (self.l.iter().sum::<f64>() - self.x);
        }
        self.theta(u).sin() / (u * self.log_rho(u).exp())
    }

    /// Two-term tail approximation at U and the bound on its remainder.
    fn tail(&self, u: f64) -> (f64, f64) {
        let g = 1.0 / (u * self.log_rho(u).exp());
        let s1: f64 = self.l.iter().map(|&l| l / (1.0 + l * l * u * u)).sum();
        let s2: f64 = self.l.iter().map(|&l| l * l * u / (1.0 + l * l * u * u)).sum();
        let s3: f64 = self.l.iter().map(|&l| l.powi(3) * u / (1.0 + l * l * u * u).powi(2)).sum();
        let dg = g * (-1.0 / u - 0.5 * s2);
        let dth = 0.5 * s1 - 0.5 * self.x;
        let ddth = -s3;
        let h = g / dth;
        let dh = (dg * dth - g * ddth) / (dth * dth);
        let k = dh / dth;
        let th = self.theta(u);
        (h * th.cos() - k * th.sin(), k.abs())
    }
}

const GK_NODES: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const GK_KRONROD: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_18,
    0.140_653_259_715_525_92,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_83,
];
/// Gauss weights for the odd-indexed Kronrod nodes.
const GK_GAUSS: [f64; 4] =
    [0.129_484_966_168_869_7, 0.279_705_391_489_276_7, 0.381_830_050_505_118_9, 0.417_959_183_673_469_4];

/// 15-point Kronrod estimate and |Kronrod - Gauss| on [a, b].
fn gk15(f: &dyn Fn(f64) -> f64, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut k = GK_KRONROD[7] * fc;
    let mut g = GK_GAUSS[3] * fc;
    for j in 0..7 {
        let v = f(c - h * GK_NODES[j]) + f(c + h * GK_NODES[j]);
        k += GK_KRONROD[j] * v;
        if j % 2 == 1 {
            g += GK_GAUSS[j / 2] * v;
        }
    }
    (k * h, ((k - g) * h).abs())
}

fn gk_rec(f: &dyn Fn(f64) -> f64, a: f64, b: f64, whole: (f64, f64), tol: f64, depth: u32, err: &mut f64) -> f64 {
    let floor = 64.0 * f64::EPSILON * whole.0.abs();
    if depth == 0 || whole.1 <= tol.max(floor) {
        *err += whole.1;
        return whole.0;
    }
    let m = 0.5 * (a + b);
    let left = gk15(f, a, m);
    let right = gk15(f, m, b);
    gk_rec(f, a, m, left, 0.5 * tol, depth - 1, err) + gk_rec(f, m, b, right, 0.5 * tol, depth - 1, err)
}

/// Adaptive Gauss-Kronrod on [a, b]; adds the error estimate to `err`.
pub(crate) fn adaptive_quad(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64, err: &mut f64) -> f64 {
    let whole = gk15(f, a, b);
    gk_rec(f, a, b, whole, tol, MAX_DEPTH, err)
}

/// CDF for spectrum `l` with max(l) = 1 at x > 0.
fn imhof(l: &[f64], x: f64) -> Result<f64> {
    let ig = Integrand { l, x };
    let sum_l: f64 = l.iter().sum();

    // Truncation point: theta' must be bounded away from zero beyond U and
    // the tail remainder bound must meet the target.
    let mut u_max = (4.0 / x).max(1.0);
    let mut tail;
    loop {
        let s1: f64 = l.iter().map(|&v| v / (1.0 + v * v * u_max * u_max)).sum();
        if s1 <= 0.5 * x {
            tail = ig.tail(u_max);
            if tail.1 / std::f64::consts::PI < TAIL_TOL {
                break;
            }
        }
        u_max *= 2.0;
        if !u_max.is_finite() || u_max * x / std::f64::consts::PI > MAX_PANELS as f64 {
            return Err(Error::IntegrationFailure(format!(
                "truncation point diverged (t/lambda_max = {x:e}, sum = {sum_l:e})"
            )));
        }
    }

    let width = 4.0 * std::f64::consts::PI / x;
    let f = |u: f64| ig.eval(u);
    let mut err = 0.0;
    let mut total = 0.0;
    let mut a = 0.0;
    let mut b = width.min(0.125);
    while a < u_max {
        let end = b.min(u_max);
        total += adaptive_quad(&f, a, end, PANEL_TOL, &mut err);
        a = end;
        b = a + a.min(width);
    }
    total += tail.0;
    let err_prob = (err + tail.1) / std::f64::consts::PI;
    if !(err_prob <= CDF_ACCURACY) || !total.is_finite() {
        return Err(Error::IntegrationFailure(format!("error estimate {err_prob:e} exceeds {CDF_ACCURACY:e}")));
    }
    Ok((0.5 - total / std::f64::consts::PI).clamp(0.0, 1.0))
}
