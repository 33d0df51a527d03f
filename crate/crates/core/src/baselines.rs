//! Embedding-clustering baselines: k-means and Ward agglomerative
//! clustering, with K chosen by silhouette or a coherence/exclusivity score.
//!
//! Embeddings are L2-normalized before clustering. Labelings are dense
//! cluster indices numbered in order of first appearance.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embed::l2_normalize;
use crate::error::{Error, Result};

pub const MAX_LLOYD_ITERS: usize = 300;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Kmeans,
    Agglomerative,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Criterion {
    Silhouette,
    Semantic,
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "kmeans" | "k-means" => Ok(Method::Kmeans),
            "agglomerative" | "ward" => Ok(Method::Agglomerative),
            _ => Err(Error::Config(format!("unknown clustering method {s:?}"))),
        }
    }
}

impl std::str::FromStr for Criterion {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "silhouette" => Ok(Criterion::Silhouette),
            "semantic" => Ok(Criterion::Semantic),
            _ => Err(Error::Config(format!("unknown selection criterion {s:?}"))),
        }
    }
}

fn normalized(embeddings: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let dim = embeddings.first().map_or(0, Vec::len);
    if embeddings.iter().any(|e| e.len() != dim) {
        return Err(Error::InvalidInput("embeddings differ in dimension".into()));
    }
    embeddings.iter().map(|e| unit(e)).collect()
}

fn unit(v: &[f64]) -> Result<Vec<f64>> {
    let mut v = v.to_vec();
    l2_normalize(&mut v)?;
    Ok(v)
}

fn check_k(n: usize, k: usize) -> Result<()> {
    if k == 0 || k > n {
        return Err(Error::InvalidInput(format!("K = {k} outside 1..={n}")));
    }
    Ok(())
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Renumbers labels densely in order of first appearance.
fn canonical(labels: &[usize]) -> Vec<usize> {
    let mut map = std::collections::HashMap::new();
    labels
        .iter()
        .map(|l| {
            let next = map.len();
            *map.entry(*l).or_insert(next)
        })
        .collect()
}

fn kmeans_pp(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut centers = vec![points[rng.random_range(0..n)].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, d) in d2.iter().enumerate() {
                if u < *d {
                    chosen = i;
                    break;
                }
                u -= d;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centers.push(points[pick].clone());
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, &centers[centers.len() - 1]));
        }
    }
    centers
}

fn nearest(p: &[f64], centers: &[Vec<f64>]) -> usize {
    let mut best = (f64::INFINITY, 0);
    for (c, center) in centers.iter().enumerate() {
        let d = sq_dist(p, center);
        if d < best.0 {
            best = (d, c);
        }
    }
    best.1
}

/// Moves the point farthest from its centroid into each empty cluster.
fn reseed_empty(points: &[Vec<f64>], labels: &mut [usize], centers: &mut [Vec<f64>]) {
    let k = centers.len();
    loop {
        let mut sizes = vec![0usize; k];
        for l in labels.iter() {
            sizes[*l] += 1;
        }
        let Some(empty) = sizes.iter().position(|s| *s == 0) else {
            return;
        };
        let mut far = (-1.0, 0);
        for (i, p) in points.iter().enumerate() {
            if sizes[labels[i]] > 1 {
                let d = sq_dist(p, &centers[labels[i]]);
                if d > far.0 {
                    far = (d, i);
                }
            }
        }
        labels[far.1] = empty;
        centers[empty] = points[far.1].clone();
    }
}

fn update_centers(points: &[Vec<f64>], labels: &[usize], centers: &mut [Vec<f64>]) {
    let dim = points[0].len();
    let mut sums = vec![vec![0.0; dim]; centers.len()];
    let mut counts = vec![0usize; centers.len()];
    for (p, l) in points.iter().zip(labels) {
        counts[*l] += 1;
        for (s, v) in sums[*l].iter_mut().zip(p) {
            *s += v;
        }
    }
    for ((c, s), n) in centers.iter_mut().zip(sums).zip(counts) {
        if n > 0 {
            *c = s.into_iter().map(|v| v / n as f64).collect();
        }
    }
}

/// Lloyd's algorithm from a k-means++ start.
pub fn kmeans_cluster(embeddings: &[Vec<f64>], k: usize, seed: u64) -> Result<Vec<usize>> {
    let points = normalized(embeddings)?;
    check_k(points.len(), k)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(k as u64);
    let mut centers = kmeans_pp(&points, k, &mut rng);
    let mut labels: Vec<usize> = points.iter().map(|p| nearest(p, &centers)).collect();
    reseed_empty(&points, &mut labels, &mut centers);
    for _ in 0..MAX_LLOYD_ITERS {
        update_centers(&points, &labels, &mut centers);
        let mut next: Vec<usize> = points.iter().map(|p| nearest(p, &centers)).collect();
        reseed_empty(&points, &mut next, &mut centers);
        if next == labels {
            break;
        }
        labels = next;
    }
    Ok(canonical(&labels))
}

/// Ward merge sequence; each step joins two cluster representatives, the
/// survivor being the smaller index.
#[derive(Clone, Debug)]
pub struct Dendrogram {
    n: usize,
    merges: Vec<(usize, usize, f64)>,
}

impl Dendrogram {
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn merges(&self) -> &[(usize, usize, f64)] {
        &self.merges
    }

    /// Labeling with exactly `k` clusters.
    pub fn cut(&self, k: usize) -> Result<Vec<usize>> {
        check_k(self.n, k)?;
        let mut parent: Vec<usize> = (0..self.n).collect();
        fn find(parent: &mut [usize], mut x: usize) -> usize {
            while parent[x] != x {
                parent[x] = parent[parent[x]];
                x = parent[x];
            }
            x
        }
        for &(i, j, _) in &self.merges[..self.n - k] {
            let (a, b) = (find(&mut parent, i), find(&mut parent, j));
            parent[b.max(a)] = a.min(b);
        }
        let roots: Vec<usize> = (0..self.n).map(|x| find(&mut parent, x)).collect();
        Ok(canonical(&roots))
    }
}

/// Full Ward dendrogram over squared Euclidean distances of the normalized
/// embeddings. Ties between candidate merges go to the lexicographically
/// smallest `(i, j)` pair.
pub fn ward_dendrogram(embeddings: &[Vec<f64>]) -> Result<Dendrogram> {
    let points = normalized(embeddings)?;
    let n = points.len();
    if n == 0 {
        return Err(Error::InvalidInput("no embeddings".into()));
    }
    let mut d = vec![0.0f64; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let v = sq_dist(&points[i], &points[j]);
            d[i * n + j] = v;
            d[j * n + i] = v;
        }
    }
    let mut size = vec![1usize; n];
    let mut active = vec![true; n];
    let row_nn = |d: &[f64], active: &[bool], i: usize| -> (f64, usize) {
        let mut best = (f64::INFINITY, usize::MAX);
        for j in 0..n {
            if j != i && active[j] && d[i * n + j] < best.0 {
                best = (d[i * n + j], j);
            }
        }
        best
    };
    let mut nn: Vec<(f64, usize)> = (0..n).map(|i| row_nn(&d, &active, i)).collect();
    let mut merges = Vec::with_capacity(n.saturating_sub(1));
    for _ in 1..n {
        // smallest distance, then smallest pair
        let mut best = (f64::INFINITY, usize::MAX, usize::MAX);
        for i in 0..n {
            if !active[i] {
                continue;
            }
            let (dist, j) = nn[i];
            let (a, b) = (i.min(j), i.max(j));
            if dist < best.0 || (dist == best.0 && (a, b) < (best.1, best.2)) {
                best = (dist, a, b);
            }
        }
        let (dist, i, j) = best;
        merges.push((i, j, dist));
        active[j] = false;
        let (ni, nj) = (size[i] as f64, size[j] as f64);
        for k in 0..n {
            if !active[k] || k == i {
                continue;
            }
            let nk = size[k] as f64;
            let v = ((ni + nk) * d[i * n + k] + (nj + nk) * d[j * n + k] - nk * dist) / (ni + nj + nk);
            d[i * n + k] = v;
            d[k * n + i] = v;
        }
        size[i] += size[j];
        nn[i] = row_nn(&d, &active, i);
        for k in 0..n {
            if !active[k] || k == i {
                continue;
            }
            if nn[k].1 == i || nn[k].1 == j {
                nn[k] = row_nn(&d, &active, k);
            } else {
                let v = d[k * n + i];
                if v < nn[k].0 || (v == nn[k].0 && i < nn[k].1) {
                    nn[k] = (v, i);
                }
            }
        }
    }
    Ok(Dendrogram { n, merges })
}

pub fn agglomerative_cluster(embeddings: &[Vec<f64>], k: usize) -> Result<Vec<usize>> {
    check_k(embeddings.len(), k)?;
    ward_dendrogram(embeddings)?.cut(k)
}

/// Pairwise cosine similarities of normalized points, row-major.
struct Similarity {
    n: usize,
    s: Vec<f64>,
}

impl Similarity {
    fn new(points: &[Vec<f64>]) -> Self {
        let n = points.len();
        let mut s = vec![1.0; n * n];
        for i in 0..n {
            for j in (i + 1)..n {
                let v = dot(&points[i], &points[j]);
                s[i * n + j] = v;
                s[j * n + i] = v;
            }
        }
        Similarity { n, s }
    }

    fn get(&self, i: usize, j: usize) -> f64 {
        self.s[i * self.n + j]
    }
}

fn check_labels(n: usize, labels: &[usize]) -> Result<usize> {
    if labels.len() != n {
        return Err(Error::InvalidInput(format!("{} labels for {n} points", labels.len())));
    }
    let k = labels.iter().max().map_or(0, |m| m + 1);
    Ok(k)
}

fn silhouette_with(sim: &Similarity, labels: &[usize]) -> Result<f64> {
    let n = sim.n;
    let k = check_labels(n, labels)?;
    let mut sizes = vec![0usize; k];
    for l in labels {
        sizes[*l] += 1;
    }
    if sizes.iter().filter(|s| **s > 0).count() < 2 {
        return Err(Error::Degenerate("silhouette needs at least two clusters".into()));
    }
    let total: f64 = (0..n)
        .into_par_iter()
        .map(|i| {
            let own = labels[i];
            if sizes[own] == 1 {
                return 0.0;
            }
            let mut sums = vec![0.0; k];
            for j in 0..n {
                if j != i {
                    sums[labels[j]] += 1.0 - sim.get(i, j);
                }
            }
            let a = sums[own] / (sizes[own] - 1) as f64;
            let b = (0..k)
                .filter(|c| *c != own && sizes[*c] > 0)
                .map(|c| sums[c] / sizes[c] as f64)
                .fold(f64::INFINITY, f64::min);
            let m = a.max(b);
            if m > 0.0 {
                (b - a) / m
            } else {
                0.0
            }
        })
        .sum();
    Ok(total / n as f64)
}

/// Mean silhouette with cosine distance; singleton clusters count as 0.
pub fn silhouette_score(embeddings: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    let points = normalized(embeddings)?;
    silhouette_with(&Similarity::new(&points), labels)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SemanticScore {
    pub coherence: f64,
    pub exclusivity: f64,
    pub score: f64,
}

fn semantic_with(points: &[Vec<f64>], sim: &Similarity, labels: &[usize]) -> Result<SemanticScore> {
    let k = check_labels(points.len(), labels)?;
    let mut members = vec![Vec::new(); k];
    for (i, l) in labels.iter().enumerate() {
        members[*l].push(i);
    }
    members.retain(|m| !m.is_empty());
    if members.is_empty() {
        return Err(Error::InvalidInput("no points".into()));
    }
    let coherence = members
        .iter()
        .map(|m| {
            if m.len() == 1 {
                return 1.0;
            }
            let mut s = 0.0;
            for (x, &i) in m.iter().enumerate() {
                for &j in &m[x + 1..] {
                    s += sim.get(i, j);
                }
            }
            s / (m.len() * (m.len() - 1) / 2) as f64
        })
        .sum::<f64>()
        / members.len() as f64;

    let exclusivity = if members.len() == 1 {
        1.0
    } else {
        // sum_{a != b} c_a . c_b = |sum c|^2 - sum |c|^2 over unit centroids
        let dim = points[0].len();
        let mut total = vec![0.0; dim];
        let mut self_dot = 0.0;
        for m in &members {
            let mut c = vec![0.0; dim];
            for &i in m {
                for (x, v) in c.iter_mut().zip(&points[i]) {
                    *x += v;
                }
            }
            // opposite members can cancel to a zero centroid
            let c = unit(&c).unwrap_or(c);
            self_dot += dot(&c, &c);
            for (t, v) in total.iter_mut().zip(&c) {
                *t += v;
            }
        }
        let kk = members.len() as f64;
        let mean_cos = (dot(&total, &total) - self_dot) / (kk * (kk - 1.0));
        (1.0 - mean_cos).clamp(0.0, 1.0)
    };
    Ok(SemanticScore {
        coherence,
        exclusivity,
        score: (coherence.max(0.0) * exclusivity).sqrt(),
    })
}

/// Geometric mean of within-cluster cosine coherence and centroid
/// exclusivity.
pub fn semantic_score(embeddings: &[Vec<f64>], labels: &[usize]) -> Result<SemanticScore> {
    let points = normalized(embeddings)?;
    semantic_with(&points, &Similarity::new(&points), labels)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub k: usize,
    /// Absent where the criterion is undefined (silhouette at K = 1).
    pub score: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSelectionCurve {
    pub method: Method,
    pub criterion: Criterion,
    pub stride: usize,
    pub seed: u64,
    pub points: Vec<CurvePoint>,
    pub chosen_k: usize,
}

/// K values visited by a scan: `1, 1+stride, ...` and `n`.
pub fn k_grid(n: usize, stride: usize) -> Vec<usize> {
    let mut ks: Vec<usize> = (1..=n).step_by(stride.max(1)).collect();
    if ks.last() != Some(&n) && n > 0 {
        ks.push(n);
    }
    ks
}

pub fn cluster(embeddings: &[Vec<f64>], method: Method, k: usize, seed: u64) -> Result<Vec<usize>> {
    match method {
        Method::Kmeans => kmeans_cluster(embeddings, k, seed),
        Method::Agglomerative => agglomerative_cluster(embeddings, k),
    }
}

/// Scores every K on the grid and picks the best; ties go to the smaller K.
pub fn select_k(
    embeddings: &[Vec<f64>],
    method: Method,
    criterion: Criterion,
    stride: usize,
    seed: u64,
) -> Result<(ModelSelectionCurve, Vec<usize>)> {
    if stride == 0 {
        return Err(Error::InvalidInput("stride must be at least 1".into()));
    }
    let points = normalized(embeddings)?;
    if points.is_empty() {
        return Err(Error::InvalidInput("no embeddings".into()));
    }
    let sim = Similarity::new(&points);
    let dendrogram = match method {
        Method::Agglomerative => Some(ward_dendrogram(&points)?),
        Method::Kmeans => None,
    };
    let label_at = |k: usize| match &dendrogram {
        Some(d) => d.cut(k),
        None => kmeans_cluster(&points, k, seed),
    };
    let scored: Vec<(CurvePoint, Vec<usize>)> = k_grid(points.len(), stride)
        .into_par_iter()
        .map(|k| {
            let labels = label_at(k)?;
            let score = match criterion {
                Criterion::Silhouette => match silhouette_with(&sim, &labels) {
                    Ok(s) => Some(s),
                    Err(Error::Degenerate(_)) => None,
                    Err(e) => return Err(e),
                },
                Criterion::Semantic => Some(semantic_with(&points, &sim, &labels)?.score),
            };
            Ok((CurvePoint { k, score }, labels))
        })
        .collect::<Result<_>>()?;

    let mut best: Option<(f64, usize)> = None;
    for (i, (p, _)) in scored.iter().enumerate() {
        if let Some(s) = p.score {
            if best.is_none_or(|(b, _)| s > b) {
                best = Some((s, i));
            }
        }
    }
    let chosen = best.map_or(0, |(_, i)| i);
    let labels = scored[chosen].1.clone();
    let curve = ModelSelectionCurve {
        method,
        criterion,
        stride,
        seed,
        chosen_k: scored[chosen].0.k,
        points: scored.into_iter().map(|(p, _)| p).collect(),
    };
    Ok((curve, labels))
}
