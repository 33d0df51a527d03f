//! Agreement statistics between labelings and between score vectors.
//!
//! Entropies use natural logarithms. Clustering measures take parallel label
//! slices; callers align them by idea key first (see [`align_labelings`]).

use std::collections::HashMap;
use std::hash::Hash;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, FisherSnedecor, StudentsT};

use crate::bucketer::BucketAssignment;
use crate::error::{Error, Result};

/// Two-sided 95% normal quantile.
const Z_975: f64 = 1.959_963_984_540_054;
/// Multiplier for Bland–Altman limits of agreement.
pub const LOA_SD: f64 = 1.96;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusteringAgreement {
    pub ami: f64,
    pub nmi: f64,
    pub v_measure: f64,
    pub homogeneity: f64,
    pub completeness: f64,
}

struct Contingency {
    n: usize,
    rows: Vec<usize>,
    cols: Vec<usize>,
    cells: Vec<(usize, usize, usize)>,
}

impl Contingency {
    fn new<A: Hash + Eq, B: Hash + Eq>(a: &[A], b: &[B]) -> Result<Self> {
        if a.len() != b.len() {
            return Err(Error::InvalidInput(format!(
                "labelings differ in length ({} vs {})",
                a.len(),
                b.len()
            )));
        }
        if a.is_empty() {
            return Err(Error::InvalidInput("empty labelings".into()));
        }
        let mut ra: HashMap<&A, usize> = HashMap::new();
        let mut rb: HashMap<&B, usize> = HashMap::new();
        let mut rows = Vec::new();
        let mut cols = Vec::new();
        let mut cells: HashMap<(usize, usize), usize> = HashMap::new();
        for (x, y) in a.iter().zip(b) {
            let i = *ra.entry(x).or_insert_with(|| {
                rows.push(0);
                rows.len() - 1
            });
            let j = *rb.entry(y).or_insert_with(|| {
                cols.push(0);
                cols.len() - 1
            });
            rows[i] += 1;
            cols[j] += 1;
            *cells.entry((i, j)).or_default() += 1;
        }
        let mut cells: Vec<_> = cells.into_iter().map(|((i, j), c)| (i, j, c)).collect();
        cells.sort_unstable();
        Ok(Contingency {
            n: a.len(),
            rows,
            cols,
            cells,
        })
    }

    fn entropy(counts: &[usize], n: usize) -> f64 {
        let n = n as f64;
        -counts
            .iter()
            .filter(|&&c| c > 0)
            .map(|&c| {
                let p = c as f64 / n;
                p * p.ln()
            })
            .sum::<f64>()
    }

    fn mutual_info(&self) -> f64 {
        let n = self.n as f64;
        let mi: f64 = self
            .cells
            .iter()
            .map(|&(i, j, c)| {
                let c = c as f64;
                c / n * (n * c / (self.rows[i] as f64 * self.cols[j] as f64)).ln()
            })
            .sum();
        mi.max(0.0)
    }

    /// Exact expected mutual information under the hypergeometric
    /// permutation model with both marginals fixed.
    fn expected_mutual_info(&self) -> f64 {
        let n = self.n;
        let mut lnfact = vec![0.0f64; n + 1];
        for i in 1..=n {
            lnfact[i] = lnfact[i - 1] + (i as f64).ln();
        }
        let nf = n as f64;
        let mut emi = 0.0;
        for &a in &self.rows {
            for &b in &self.cols {
                let lo = (a + b).saturating_sub(n).max(1);
                let hi = a.min(b);
                let fixed = lnfact[a] + lnfact[b] + lnfact[n - a] + lnfact[n - b] - lnfact[n];
                for nij in lo..=hi {
                    let ln_p = fixed - lnfact[nij] - lnfact[a - nij] - lnfact[b - nij] - lnfact[n + nij - a - b];
                    let x = nij as f64;
                    emi += x / nf * (nf * x / (a as f64 * b as f64)).ln() * ln_p.exp();
                }
            }
        }
        emi
    }

    fn same_partition(&self) -> bool {
        self.rows.len() == self.cols.len() && self.cells.len() == self.rows.len()
    }
}

/// All five clustering agreement measures for one pair of labelings.
///
/// Degenerate cases: a labeling with zero entropy has homogeneity (or
/// completeness) 1; NMI is 1 when both entropies are zero; AMI is 1 for
/// identical partitions and 0 whenever its denominator vanishes otherwise.
pub fn clustering_agreement<A: Hash + Eq, B: Hash + Eq>(a: &[A], b: &[B]) -> Result<ClusteringAgreement> {
    let t = Contingency::new(a, b)?;
    let ha = Contingency::entropy(&t.rows, t.n);
    let hb = Contingency::entropy(&t.cols, t.n);
    let mi = t.mutual_info().min(ha).min(hb);
    let mean_h = 0.5 * (ha + hb);

    let homogeneity = if ha > 0.0 { mi / ha } else { 1.0 };
    let completeness = if hb > 0.0 { mi / hb } else { 1.0 };
    let v_measure = if homogeneity + completeness > 0.0 {
        2.0 * homogeneity * completeness / (homogeneity + completeness)
    } else {
        0.0
    };
    let nmi = if mean_h > 0.0 { mi / mean_h } else { 1.0 };
    let ami = if t.same_partition() {
        1.0
    } else {
        let emi = t.expected_mutual_info();
        let denom = mean_h - emi;
        if denom.abs() <= f64::EPSILON * mean_h.max(1.0) {
            0.0
        } else {
            (mi - emi) / denom
        }
    };
    Ok(ClusteringAgreement {
        ami,
        nmi,
        v_measure,
        homogeneity,
        completeness,
    })
}

pub fn ami<A: Hash + Eq, B: Hash + Eq>(a: &[A], b: &[B]) -> Result<f64> {
    Ok(clustering_agreement(a, b)?.ami)
}

pub fn nmi<A: Hash + Eq, B: Hash + Eq>(a: &[A], b: &[B]) -> Result<f64> {
    Ok(clustering_agreement(a, b)?.nmi)
}

pub fn v_measure<A: Hash + Eq, B: Hash + Eq>(a: &[A], b: &[B]) -> Result<f64> {
    Ok(clustering_agreement(a, b)?.v_measure)
}

/// Pairs the bucket ids of two assignments of the same task by idea key.
pub fn align_labelings(a: &BucketAssignment, b: &BucketAssignment) -> Result<(Vec<u32>, Vec<u32>)> {
    let bm = b.bucket_map();
    if a.len() != b.len() {
        return Err(Error::Coverage {
            message: format!("task {}: labelings cover {} and {} ideas", a.task_id, a.len(), b.len()),
            keys: vec![],
        });
    }
    let mut la = Vec::with_capacity(a.len());
    let mut lb = Vec::with_capacity(a.len());
    let mut missing = Vec::new();
    for x in &a.assignments {
        match bm.get(&x.key) {
            Some(id) => {
                la.push(x.bucket.get());
                lb.push(id.get());
            }
            None => missing.push(x.key.to_string()),
        }
    }
    if !missing.is_empty() {
        return Err(Error::Coverage {
            message: format!("task {}: ideas labeled on one side only", a.task_id),
            keys: missing,
        });
    }
    Ok((la, lb))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub r: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub p: f64,
    pub n: usize,
}

fn check_pair(x: &[f64], y: &[f64], min: usize) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::InvalidInput(format!(
            "vectors differ in length ({} vs {})",
            x.len(),
            y.len()
        )));
    }
    if x.len() < min {
        return Err(Error::InvalidInput(format!(
            "need at least {min} pairs, got {}",
            x.len()
        )));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite value".into()));
    }
    Ok(())
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn sample_sd(x: &[f64]) -> f64 {
    let m = mean(x);
    (x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (x.len() - 1) as f64).sqrt()
}

fn t_two_sided(t: f64, df: f64) -> f64 {
    if t.is_infinite() {
        return 0.0;
    }
    let dist = StudentsT::new(0.0, 1.0, df).expect("positive df");
    (2.0 * (1.0 - dist.cdf(t.abs()))).clamp(0.0, 1.0)
}

fn correlation_from_r(r: f64, n: usize) -> Correlation {
    let r = r.clamp(-1.0, 1.0);
    let (ci_low, ci_high) = if r.abs() == 1.0 || n <= 3 {
        if r.abs() == 1.0 {
            (r, r)
        } else {
            (-1.0, 1.0)
        }
    } else {
        let z = r.atanh();
        let se = 1.0 / ((n - 3) as f64).sqrt();
        ((z - Z_975 * se).tanh(), (z + Z_975 * se).tanh())
    };
    let df = (n - 2) as f64;
    let p = if r.abs() == 1.0 {
        0.0
    } else {
        t_two_sided(r * (df / (1.0 - r * r)).sqrt(), df)
    };
    Correlation {
        r,
        ci_low,
        ci_high,
        p,
        n,
    }
}

/// Product-moment correlation with a Fisher-z 95% interval and a
/// two-sided t-test p-value.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<Correlation> {
    check_pair(x, y, 3)?;
    let (mx, my) = (mean(x), mean(y));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Degenerate("correlation undefined for a constant vector".into()));
    }
    Ok(correlation_from_r(sxy / (sxx * syy).sqrt(), x.len()))
}

/// Ranks starting at 1, tied values sharing their average rank.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Pearson correlation of average ranks; same interval and p-value recipe.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<Correlation> {
    check_pair(x, y, 3)?;
    pearson(&average_ranks(x), &average_ranks(y))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Icc {
    pub icc31: f64,
    pub icc31_ci: (f64, f64),
    pub icc3k: f64,
    pub icc3k_ci: (f64, f64),
    pub f: f64,
    pub df1: f64,
    pub df2: f64,
    pub p: f64,
}

/// Two-way mixed, consistency ICC for an `n × k` matrix of targets by judges.
pub fn icc(rows: &[Vec<f64>]) -> Result<Icc> {
    let n = rows.len();
    if n < 3 {
        return Err(Error::InvalidInput(format!("ICC needs at least 3 targets, got {n}")));
    }
    let k = rows[0].len();
    if k < 2 {
        return Err(Error::InvalidInput("ICC needs at least 2 judges".into()));
    }
    if rows.iter().any(|r| r.len() != k || r.iter().any(|v| !v.is_finite())) {
        return Err(Error::InvalidInput("ICC matrix has missing or non-finite cells".into()));
    }
    let (nf, kf) = (n as f64, k as f64);
    let grand = rows.iter().flatten().sum::<f64>() / (nf * kf);
    let row_means: Vec<f64> = rows.iter().map(|r| mean(r)).collect();
    let col_means: Vec<f64> = (0..k).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / nf).collect();
    let ss_rows = kf * row_means.iter().map(|m| (m - grand).powi(2)).sum::<f64>();
    let ss_cols = nf * col_means.iter().map(|m| (m - grand).powi(2)).sum::<f64>();
    let ss_total: f64 = rows.iter().flatten().map(|v| (v - grand).powi(2)).sum();
    let ss_err = (ss_total - ss_rows - ss_cols).max(0.0);
    let df1 = nf - 1.0;
    let df2 = (nf - 1.0) * (kf - 1.0);
    let bms = ss_rows / df1;
    let ems = ss_err / df2;
    // residual sums this small relative to the total are rounding noise
    let ems = if ss_err <= 1e-12 * ss_total { 0.0 } else { ems };

    if ems == 0.0 {
        if bms == 0.0 {
            return Err(Error::Degenerate("ICC undefined: every cell equal".into()));
        }
        return Ok(Icc {
            icc31: 1.0,
            icc31_ci: (1.0, 1.0),
            icc3k: 1.0,
            icc3k_ci: (1.0, 1.0),
            f: f64::INFINITY,
            df1,
            df2,
            p: 0.0,
        });
    }
    let icc31 = (bms - ems) / (bms + (kf - 1.0) * ems);
    let icc3k = (bms - ems) / bms;
    let f = bms / ems;
    let fd = FisherSnedecor::new(df1, df2).expect("positive df");
    let p = (1.0 - fd.cdf(f)).clamp(0.0, 1.0);
    let f_low = f / fd.inverse_cdf(0.975);
    let f_high = f * FisherSnedecor::new(df2, df1).expect("positive df").inverse_cdf(0.975);
    Ok(Icc {
        icc31,
        icc31_ci: ((f_low - 1.0) / (f_low + kf - 1.0), (f_high - 1.0) / (f_high + kf - 1.0)),
        icc3k,
        icc3k_ci: (1.0 - 1.0 / f_low, 1.0 - 1.0 / f_high),
        f,
        df1,
        df2,
        p,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlandAltman {
    pub bias: f64,
    pub sd: f64,
    pub loa_low: f64,
    pub loa_high: f64,
    /// Percentage of differences inside the limits, inclusive.
    pub pct_within: f64,
    pub prop_bias_slope: f64,
    pub slope_p: f64,
}

/// Differences are `x - y`; proportional bias is the OLS slope of the
/// differences on the pair means.
pub fn bland_altman(x: &[f64], y: &[f64]) -> Result<BlandAltman> {
    check_pair(x, y, 3)?;
    let diffs: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).collect();
    let means: Vec<f64> = x.iter().zip(y).map(|(a, b)| 0.5 * (a + b)).collect();
    let bias = mean(&diffs);
    let sd = sample_sd(&diffs);
    let (loa_low, loa_high) = (bias - LOA_SD * sd, bias + LOA_SD * sd);
    let within = diffs.iter().filter(|d| **d >= loa_low && **d <= loa_high).count();
    let pct_within = if sd == 0.0 {
        100.0
    } else {
        100.0 * within as f64 / diffs.len() as f64
    };
    let (slope, slope_p) = ols_slope(&means, &diffs);
    Ok(BlandAltman {
        bias,
        sd,
        loa_low,
        loa_high,
        pct_within,
        prop_bias_slope: slope,
        slope_p,
    })
}

/// Slope of `y` on `x` and its two-sided t-test p-value. A constant `x`
/// gives slope 0 with p 1.
fn ols_slope(x: &[f64], y: &[f64]) -> (f64, f64) {
    let (mx, my) = (mean(x), mean(y));
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    if sxx == 0.0 {
        return (0.0, 1.0);
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = x.iter().zip(y).map(|(a, b)| (b - intercept - slope * a).powi(2)).sum();
    let df = (x.len() - 2) as f64;
    let se = (sse / df / sxx).sqrt();
    let syy: f64 = y.iter().map(|v| (v - my).powi(2)).sum();
    if se == 0.0 || sse <= 1e-24 * syy.max(f64::MIN_POSITIVE) {
        return (slope, if slope.abs() <= f64::EPSILON { 1.0 } else { 0.0 });
    }
    (slope, t_two_sided(slope / se, df))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanCi {
    pub mean: f64,
    pub n: usize,
    /// Absent with fewer than two values.
    pub ci: Option<(f64, f64)>,
}

/// Mean with a t-distribution 95% interval.
pub fn mean_ci(values: &[f64]) -> Result<MeanCi> {
    if values.is_empty() {
        return Err(Error::InvalidInput("mean of no values".into()));
    }
    let n = values.len();
    let m = mean(values);
    let ci = (n >= 2).then(|| {
        let half = sample_sd(values) / (n as f64).sqrt()
            * StudentsT::new(0.0, 1.0, (n - 1) as f64)
                .expect("positive df")
                .inverse_cdf(0.975);
        (m - half, m + half)
    });
    Ok(MeanCi { mean: m, n, ci })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreAgreement {
    pub n: usize,
    pub pearson: Correlation,
    pub spearman: Correlation,
    pub icc: Icc,
    pub bland_altman: BlandAltman,
}

/// Every participant-level statistic for two aligned score vectors.
pub fn score_agreement(x: &[f64], y: &[f64]) -> Result<ScoreAgreement> {
    let rows: Vec<Vec<f64>> = x.iter().zip(y).map(|(a, b)| vec![*a, *b]).collect();
    Ok(ScoreAgreement {
        n: x.len(),
        pearson: pearson(x, y)?,
        spearman: spearman(x, y)?,
        icc: icc(&rows)?,
        bland_altman: bland_altman(x, y)?,
    })
}
