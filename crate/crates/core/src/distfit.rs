//! Discrete power-law fits of bucket-size distributions, with a
//! likelihood-ratio comparison against a discretized lognormal.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};

/// Fewest tail observations a fit is attempted on.
pub const MIN_TAIL: usize = 10;
const ALPHA_RANGE: (f64, f64) = (1.01, 6.0);
const GOLDEN_TOL: f64 = 1e-7;

/// Hurwitz zeta `sum_{k>=0} (q+k)^-s` for `s > 1`, `q > 0`.
///
/// Direct summation of the first terms, then an Euler–Maclaurin tail.
pub fn hurwitz_zeta(s: f64, q: f64) -> f64 {
    assert!(s > 1.0 && q > 0.0, "hurwitz_zeta needs s > 1 and q > 0");
    const DIRECT: usize = 12;
    // B_2j / (2j)!
    const B2J_OVER_FACT: [f64; 8] = [
        1.0 / 12.0,
        -1.0 / 720.0,
        1.0 / 30_240.0,
        -1.0 / 1_209_600.0,
        1.0 / 47_900_160.0,
        -691.0 / 1_307_674_368_000.0,
        1.0 / 74_724_249_600.0,
        -3617.0 / 10_670_622_842_880_000.0,
    ];
    let mut sum = 0.0;
    for k in 0..DIRECT {
        sum += (q + k as f64).powf(-s);
    }
    let a = q + DIRECT as f64;
    let a_pow = a.powf(-s);
    sum += a * a_pow / (s - 1.0) + 0.5 * a_pow;
    // rising product s(s+1)...(s+2j-2) times a^(-s-2j+1)
    let mut factor = s * a_pow / a;
    for (j, b) in B2J_OVER_FACT.iter().enumerate() {
        let term = b * factor;
        sum += term;
        if term.abs() < 1e-17 * sum {
            break;
        }
        let m = 2.0 * j as f64;
        factor *= (s + m + 1.0) * (s + m + 2.0) / (a * a);
    }
    sum
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PowerLawFit {
    pub alpha: f64,
    pub alpha_stderr: f64,
    pub xmin: u64,
    pub ks_statistic: f64,
    pub n_tail: usize,
    pub n: usize,
    pub lr_vs_lognormal: f64,
    pub lr_p: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct XminCandidate {
    pub xmin: u64,
    pub alpha: f64,
    pub ks_statistic: f64,
    pub n_tail: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LognormalFit {
    pub mu: f64,
    pub sigma: f64,
    pub loglik: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LikelihoodRatio {
    /// Positive favors the power law.
    pub lr: f64,
    pub normalized: f64,
    pub p: f64,
    pub lognormal: LognormalFit,
}

/// Sorted distinct values with multiplicities.
struct Histogram {
    values: Vec<u64>,
    counts: Vec<usize>,
    /// Suffix sums from each distinct value: count and sum of ln x.
    tail_n: Vec<usize>,
    tail_ln: Vec<f64>,
}

impl Histogram {
    fn new(sizes: &[u64]) -> Result<Self> {
        if sizes.contains(&0) {
            return Err(Error::InvalidInput("sizes must be positive".into()));
        }
        let mut sorted = sizes.to_vec();
        sorted.sort_unstable();
        let mut values: Vec<u64> = Vec::new();
        let mut counts: Vec<usize> = Vec::new();
        for x in sorted {
            if values.last() == Some(&x) {
                *counts.last_mut().unwrap() += 1;
            } else {
                values.push(x);
                counts.push(1);
            }
        }
        let mut tail_n = vec![0; values.len() + 1];
        let mut tail_ln = vec![0.0; values.len() + 1];
        for i in (0..values.len()).rev() {
            tail_n[i] = tail_n[i + 1] + counts[i];
            tail_ln[i] = tail_ln[i + 1] + counts[i] as f64 * (values[i] as f64).ln();
        }
        Ok(Histogram {
            values,
            counts,
            tail_n,
            tail_ln,
        })
    }

    fn tail_len(&self, from: usize) -> usize {
        self.tail_n[from]
    }
}

fn pl_loglik(alpha: f64, xmin: u64, n: usize, sum_ln: f64) -> f64 {
    -(n as f64) * hurwitz_zeta(alpha, xmin as f64).ln() - alpha * sum_ln
}

fn golden_max(f: impl Fn(f64) -> f64, lo: f64, hi: f64) -> f64 {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (lo, hi);
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while b - a > GOLDEN_TOL {
        if fc > fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    0.5 * (a + b)
}

/// Largest gap between the empirical and fitted tail CDFs over every
/// integer at or above `xmin`.
fn ks_distance(h: &Histogram, from: usize, xmin: u64, alpha: f64) -> f64 {
    let z0 = hurwitz_zeta(alpha, xmin as f64);
    let cdf = |x: u64| 1.0 - hurwitz_zeta(alpha, x as f64 + 1.0) / z0;
    let n = h.tail_len(from) as f64;
    let mut seen = 0usize;
    let mut d: f64 = 0.0;
    for i in from..h.values.len() {
        seen += h.counts[i];
        let emp = seen as f64 / n;
        let x = h.values[i];
        d = d.max((emp - cdf(x)).abs());
        // the empirical CDF stays flat until the next observed value
        let next = h.values.get(i + 1).map_or(u64::MAX, |v| *v);
        if next > x + 1 && next != u64::MAX {
            d = d.max((emp - cdf(next - 1)).abs());
        }
    }
    d
}

fn fit_at(h: &Histogram, from: usize, xmin: u64) -> XminCandidate {
    let n = h.tail_len(from);
    let sum_ln = h.tail_ln[from];
    let alpha = golden_max(|a| pl_loglik(a, xmin, n, sum_ln), ALPHA_RANGE.0, ALPHA_RANGE.1);
    XminCandidate {
        xmin,
        alpha,
        ks_statistic: ks_distance(h, from, xmin, alpha),
        n_tail: n,
    }
}

fn check_sizes(sizes: &[u64]) -> Result<()> {
    if sizes.len() < MIN_TAIL {
        return Err(Error::InsufficientData(format!(
            "{} observations; need at least {MIN_TAIL}",
            sizes.len()
        )));
    }
    if sizes.iter().all(|s| *s == sizes[0]) {
        return Err(Error::Degenerate("all sizes are equal".into()));
    }
    Ok(())
}

/// Fits α at every usable `xmin`: each distinct observed size whose tail
/// holds at least [`MIN_TAIL`] observations and two distinct values.
pub fn scan_xmin(sizes: &[u64]) -> Result<Vec<XminCandidate>> {
    check_sizes(sizes)?;
    let h = Histogram::new(sizes)?;
    let usable: Vec<usize> = (0..h.values.len())
        .filter(|&i| h.tail_len(i) >= MIN_TAIL && i + 1 < h.values.len())
        .collect();
    Ok(usable.into_par_iter().map(|i| fit_at(&h, i, h.values[i])).collect())
}

/// Maximum-likelihood discrete power law with `xmin` chosen by minimum KS
/// distance, plus the lognormal comparison on the selected tail.
pub fn fit_powerlaw(sizes: &[u64]) -> Result<PowerLawFit> {
    let scan = scan_xmin(sizes)?;
    let best = scan
        .iter()
        .min_by(|a, b| a.ks_statistic.total_cmp(&b.ks_statistic).then(a.xmin.cmp(&b.xmin)))
        .ok_or_else(|| Error::InsufficientData("no xmin leaves a usable tail".into()))?;
    let mut fit = PowerLawFit {
        alpha: best.alpha,
        alpha_stderr: (best.alpha - 1.0) / (best.n_tail as f64).sqrt(),
        xmin: best.xmin,
        ks_statistic: best.ks_statistic,
        n_tail: best.n_tail,
        n: sizes.len(),
        lr_vs_lognormal: f64::NAN,
        lr_p: f64::NAN,
    };
    let lr = compare_lognormal(sizes, &fit)?;
    fit.lr_vs_lognormal = lr.lr;
    fit.lr_p = lr.p;
    Ok(fit)
}

/// Power-law fit with `xmin` held fixed.
pub fn fit_powerlaw_at(sizes: &[u64], xmin: u64) -> Result<PowerLawFit> {
    check_sizes(sizes)?;
    let h = Histogram::new(sizes)?;
    let from = h.values.partition_point(|v| *v < xmin);
    if h.tail_len(from) < MIN_TAIL || from + 1 >= h.values.len() {
        return Err(Error::InsufficientData(format!(
            "too few observations at or above {xmin}"
        )));
    }
    let c = fit_at(&h, from, xmin);
    let mut fit = PowerLawFit {
        alpha: c.alpha,
        alpha_stderr: (c.alpha - 1.0) / (c.n_tail as f64).sqrt(),
        xmin,
        ks_statistic: c.ks_statistic,
        n_tail: c.n_tail,
        n: sizes.len(),
        lr_vs_lognormal: f64::NAN,
        lr_p: f64::NAN,
    };
    let lr = compare_lognormal(sizes, &fit)?;
    fit.lr_vs_lognormal = lr.lr;
    fit.lr_p = lr.p;
    Ok(fit)
}

/// Log-likelihood of the power law at `alpha` on the tail `x >= xmin`.
pub fn powerlaw_loglik(sizes: &[u64], alpha: f64, xmin: u64) -> f64 {
    let tail: Vec<f64> = sizes.iter().filter(|x| **x >= xmin).map(|x| (*x as f64).ln()).collect();
    pl_loglik(alpha, xmin, tail.len(), tail.iter().sum())
}

/// `P(Y > y)` for a lognormal `Y`, and the lower tail, both via erfc so
/// neither side loses precision.
fn ln_bin_mass(x: u64, mu: f64, sigma: f64) -> f64 {
    let z = |y: f64| (y.ln() - mu) / (sigma * std::f64::consts::SQRT_2);
    let (lo, hi) = (z(x as f64 - 0.5), z(x as f64 + 0.5));
    let mass = if lo > 0.0 {
        0.5 * (erfc(lo) - erfc(hi))
    } else {
        0.5 * (erfc(-hi) - erfc(-lo))
    };
    mass.max(f64::MIN_POSITIVE).ln()
}

fn ln_survival(y: f64, mu: f64, sigma: f64) -> f64 {
    let z = (y.ln() - mu) / (sigma * std::f64::consts::SQRT_2);
    (0.5 * erfc(z)).max(f64::MIN_POSITIVE).ln()
}

/// Per-observation log-likelihoods of the lognormal discretized by
/// rounding, conditioned on `x >= xmin`.
fn lognormal_terms(tail: &[u64], xmin: u64, mu: f64, sigma: f64) -> impl Iterator<Item = f64> + '_ {
    let norm = ln_survival(xmin as f64 - 0.5, mu, sigma);
    tail.iter().map(move |x| ln_bin_mass(*x, mu, sigma) - norm)
}

/// Minimizes `f` over two parameters by Nelder–Mead.
fn nelder_mead(f: impl Fn([f64; 2]) -> f64, start: [f64; 2], step: [f64; 2]) -> [f64; 2] {
    let mut simplex = [start, [start[0] + step[0], start[1]], [start[0], start[1] + step[1]]];
    let mut values = simplex.map(&f);
    for _ in 0..5000 {
        let mut order = [0usize, 1, 2];
        order.sort_by(|a, b| values[*a].total_cmp(&values[*b]));
        simplex = order.map(|i| simplex[i]);
        values = order.map(|i| values[i]);
        if (values[2] - values[0]).abs() <= 1e-12 * (1.0 + values[0].abs()) {
            break;
        }
        let centroid = [
            0.5 * (simplex[0][0] + simplex[1][0]),
            0.5 * (simplex[0][1] + simplex[1][1]),
        ];
        let toward = |t: f64| {
            [
                centroid[0] + t * (simplex[2][0] - centroid[0]),
                centroid[1] + t * (simplex[2][1] - centroid[1]),
            ]
        };
        let reflected = toward(-1.0);
        let fr = f(reflected);
        if fr < values[0] {
            let expanded = toward(-2.0);
            let fe = f(expanded);
            (simplex[2], values[2]) = if fe < fr { (expanded, fe) } else { (reflected, fr) };
        } else if fr < values[1] {
            (simplex[2], values[2]) = (reflected, fr);
        } else {
            let contracted = if fr < values[2] { toward(-0.5) } else { toward(0.5) };
            let fc = f(contracted);
            if fc < values[2].min(fr) {
                (simplex[2], values[2]) = (contracted, fc);
            } else {
                for i in 1..3 {
                    simplex[i] = [
                        simplex[0][0] + 0.5 * (simplex[i][0] - simplex[0][0]),
                        simplex[0][1] + 0.5 * (simplex[i][1] - simplex[0][1]),
                    ];
                    values[i] = f(simplex[i]);
                }
            }
        }
    }
    let best = (0..3).min_by(|a, b| values[*a].total_cmp(&values[*b])).unwrap();
    simplex[best]
}

/// Maximum-likelihood lognormal on the tail `x >= xmin`.
pub fn fit_lognormal(sizes: &[u64], xmin: u64) -> Result<LognormalFit> {
    let tail: Vec<u64> = sizes.iter().copied().filter(|x| *x >= xmin).collect();
    if tail.len() < MIN_TAIL {
        return Err(Error::InsufficientData(format!(
            "lognormal tail has {} observations; need at least {MIN_TAIL}",
            tail.len()
        )));
    }
    let logs: Vec<f64> = tail.iter().map(|x| (*x as f64).ln()).collect();
    let m = logs.iter().sum::<f64>() / logs.len() as f64;
    let sd = (logs.iter().map(|l| (l - m).powi(2)).sum::<f64>() / logs.len() as f64)
        .sqrt()
        .max(0.1);
    let neg_loglik = |p: [f64; 2]| {
        let (mu, sigma) = (p[0], p[1].exp());
        if !(-100.0..=100.0).contains(&mu) || !(1e-3..=100.0).contains(&sigma) {
            return f64::INFINITY;
        }
        -lognormal_terms(&tail, xmin, mu, sigma).sum::<f64>()
    };
    let [mu, log_sigma] = nelder_mead(neg_loglik, [m, sd.ln()], [0.5, 0.3]);
    Ok(LognormalFit {
        mu,
        sigma: log_sigma.exp(),
        loglik: -neg_loglik([mu, log_sigma]),
    })
}

/// Log-likelihood ratio of the power law over the lognormal on the fit's
/// tail, with the two-sided normalized-ratio p-value.
pub fn compare_lognormal(sizes: &[u64], fit: &PowerLawFit) -> Result<LikelihoodRatio> {
    let tail: Vec<u64> = sizes.iter().copied().filter(|x| *x >= fit.xmin).collect();
    let lognormal = fit_lognormal(sizes, fit.xmin)?;
    let ln_z = hurwitz_zeta(fit.alpha, fit.xmin as f64).ln();
    let diffs: Vec<f64> = tail
        .iter()
        .zip(lognormal_terms(&tail, fit.xmin, lognormal.mu, lognormal.sigma))
        .map(|(x, ln_ln)| (-fit.alpha * (*x as f64).ln() - ln_z) - ln_ln)
        .collect();
    let n = diffs.len() as f64;
    let lr: f64 = diffs.iter().sum();
    let mean = lr / n;
    let sd = (diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / n).sqrt();
    let (normalized, p) = if sd > 0.0 {
        let z = lr / (sd * n.sqrt());
        (z, erfc(z.abs() / std::f64::consts::SQRT_2))
    } else if lr == 0.0 {
        (0.0, 1.0)
    } else {
        (lr.signum() * f64::INFINITY, 0.0)
    };
    Ok(LikelihoodRatio {
        lr,
        normalized,
        p,
        lognormal,
    })
}
