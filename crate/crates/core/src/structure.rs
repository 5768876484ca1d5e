//! Structure of the embedding space: agglomerative clustering, PCA, t-SNE
//! and centroid similarity heatmaps.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2, Axis};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::analysis::{centroid, cosine};
use crate::ensemble::EmbeddingSet;
use crate::error::{Error, Result};
use crate::{par, rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Linkage {
    Single,
    Complete,
    Average,
    Ward,
}

impl Linkage {
    pub const ALL: [Linkage; 4] = [Linkage::Single, Linkage::Complete, Linkage::Average, Linkage::Ward];
}

impl FromStr for Linkage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "single" => Ok(Self::Single),
            "complete" => Ok(Self::Complete),
            "average" => Ok(Self::Average),
            "ward" => Ok(Self::Ward),
            _ => Err(Error::UnknownLinkage(s.to_string())),
        }
    }
}

impl fmt::Display for Linkage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Single => "single",
            Self::Complete => "complete",
            Self::Average => "average",
            Self::Ward => "ward",
        })
    }
}

/// One agglomeration step. Leaves are nodes `0..n`; merge `k` creates node
/// `n + k`. `a < b`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Merge {
    pub a: usize,
    pub b: usize,
    pub height: f64,
    pub size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dendrogram {
    pub linkage: Linkage,
    pub labels: Vec<String>,
    pub merges: Vec<Merge>,
}

impl Dendrogram {
    pub fn n_leaves(&self) -> usize {
        self.labels.len()
    }

    /// Leaves under `node`, left to right.
    pub fn leaves_under(&self, node: usize) -> Vec<usize> {
        let n = self.n_leaves();
        let mut out = Vec::new();
        let mut stack = vec![node];
        while let Some(x) = stack.pop() {
            if x < n {
                out.push(x);
            } else {
                let m = self.merges[x - n];
                stack.push(m.b);
                stack.push(m.a);
            }
        }
        out
    }

    /// Left-to-right leaf order of the whole tree.
    pub fn leaf_order(&self) -> Vec<usize> {
        if self.merges.is_empty() {
            return (0..self.n_leaves()).collect();
        }
        self.leaves_under(self.n_leaves() + self.merges.len() - 1)
    }

    fn index_of(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    /// Whether `x` and `y` share a cluster before `z` joins either.
    pub fn joins_before(&self, x: &str, y: &str, z: &str) -> Option<bool> {
        let (x, y, z) = (self.index_of(x)?, self.index_of(y)?, self.index_of(z)?);
        let n = self.n_leaves();
        for k in 0..self.merges.len() {
            let leaves = self.leaves_under(n + k);
            if leaves.contains(&x) && leaves.contains(&y) {
                return Some(!leaves.contains(&z));
            }
        }
        None
    }
}

/// `1 - cosine similarity` between every pair of rows.
pub fn cosine_distances(rows: &Array2<f64>) -> Result<Array2<f64>> {
    let mut norm = rows.clone();
    for (i, mut r) in norm.axis_iter_mut(Axis(0)).enumerate() {
        let n = r.dot(&r).sqrt();
        if !(n > 0.0) {
            return Err(Error::invalid(format!("row {i} has zero norm")));
        }
        r /= n;
    }
    let mut d = norm.dot(&norm.t()).mapv(|c| (1.0 - c).max(0.0));
    d.diag_mut().fill(0.0);
    // Symmetrise away rounding.
    let dt = d.t().to_owned();
    Ok((d + dt) * 0.5)
}

fn validate_dissimilarity(d: &Array2<f64>, labels: &[String]) -> Result<()> {
    let n = labels.len();
    if n < 2 {
        return Err(Error::invalid("clustering needs at least two items"));
    }
    if d.dim() != (n, n) {
        return Err(Error::shape(format!("{} labels for a {:?} distance matrix", n, d.dim())));
    }
    if d.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::invalid("distances must be finite and non-negative"));
    }
    Ok(())
}

/// Agglomerative clustering with Lance-Williams updates on the given
/// dissimilarities. Ties go to the pair whose smallest leaf labels come
/// first lexicographically.
pub fn hierarchical_cluster(dist: &Array2<f64>, labels: &[String], linkage: Linkage) -> Result<Dendrogram> {
    validate_dissimilarity(dist, labels)?;
    let n = labels.len();
    let mut d = dist.clone();
    if linkage == Linkage::Ward {
        // Ward updates act on squared dissimilarities.
        d.mapv_inplace(|v| v * v);
    }
    let mut active: Vec<bool> = vec![true; n];
    let mut node: Vec<usize> = (0..n).collect();
    let mut size: Vec<usize> = vec![1; n];
    let mut key: Vec<&str> = labels.iter().map(String::as_str).collect();
    let mut merges = Vec::with_capacity(n - 1);

    for step in 0..n - 1 {
        let mut best: Option<(usize, usize)> = None;
        for i in 0..n {
            if !active[i] {
                continue;
            }
            for j in i + 1..n {
                if !active[j] {
                    continue;
                }
                best = match best {
                    None => Some((i, j)),
                    Some((bi, bj)) => {
                        let (v, bv) = (d[[i, j]], d[[bi, bj]]);
                        if v < bv || (v == bv && pair_key(&key, i, j) < pair_key(&key, bi, bj)) {
                            Some((i, j))
                        } else {
                            Some((bi, bj))
                        }
                    }
                };
            }
        }
        let (i, j) = best.expect("two active clusters");
        let dij = d[[i, j]];
        let height = if linkage == Linkage::Ward { dij.sqrt() } else { dij };
        let (ni, nj) = (size[i] as f64, size[j] as f64);
        for k in 0..n {
            if !active[k] || k == i || k == j {
                continue;
            }
            let (dik, djk) = (d[[i, k]], d[[j, k]]);
            let nk = size[k] as f64;
            let v = match linkage {
                Linkage::Single => dik.min(djk),
                Linkage::Complete => dik.max(djk),
                Linkage::Average => (ni * dik + nj * djk) / (ni + nj),
                Linkage::Ward => ((ni + nk) * dik + (nj + nk) * djk - nk * dij) / (ni + nj + nk),
            };
            d[[i, k]] = v;
            d[[k, i]] = v;
        }
        let (a, b) = (node[i].min(node[j]), node[i].max(node[j]));
        merges.push(Merge { a, b, height, size: size[i] + size[j] });
        size[i] += size[j];
        node[i] = n + step;
        key[i] = key[i].min(key[j]);
        active[j] = false;
    }
    Ok(Dendrogram { linkage, labels: labels.to_vec(), merges })
}

fn pair_key<'a>(key: &[&'a str], i: usize, j: usize) -> (&'a str, &'a str) {
    let (a, b) = (key[i], key[j]);
    if a <= b {
        (a, b)
    } else {
        (b, a)
    }
}

/// Clusters script centroids under cosine distance.
pub fn cluster_centroids(centroids: &[(String, Array1<f64>)], linkage: Linkage) -> Result<Dendrogram> {
    let labels: Vec<String> = centroids.iter().map(|(l, _)| l.clone()).collect();
    let rows = stack_rows(centroids.iter().map(|(_, c)| c))?;
    hierarchical_cluster(&cosine_distances(&rows)?, &labels, linkage)
}

fn stack_rows<'a>(rows: impl Iterator<Item = &'a Array1<f64>>) -> Result<Array2<f64>> {
    let views: Vec<_> = rows.map(|r| r.view().insert_axis(Axis(0))).collect();
    ndarray::concatenate(Axis(0), &views).map_err(|e| Error::shape(e.to_string()))
}

/// Per-script centroid embeddings in the given order.
pub fn script_centroids(sets: &[&EmbeddingSet]) -> Result<Vec<(String, Array1<f64>)>> {
    sets.iter().map(|s| Ok((s.script.clone(), centroid(s)?))).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProjectionMethod {
    Pca,
    Tsne,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Projection {
    pub method: ProjectionMethod,
    /// One row per item.
    pub coords: Array2<f64>,
    /// PCA only: variance fraction per retained component.
    pub explained: Vec<f64>,
    /// PCA only: set when the data has fewer than `dims` nonzero components.
    pub rank_deficient: bool,
}

impl Projection {
    pub fn total_explained(&self) -> f64 {
        self.explained.iter().sum()
    }
}

/// Principal component projection onto the top `dims` components.
pub fn pca_project(x: &Array2<f64>, dims: usize) -> Result<Projection> {
    let (n, d) = x.dim();
    if !(2..=3).contains(&dims) && dims != 1 {
        return Err(Error::invalid("PCA projects onto 1, 2 or 3 components"));
    }
    if n < dims + 1 {
        return Err(Error::invalid(format!("PCA onto {dims} components needs at least {} items, got {n}", dims + 1)));
    }
    let mean = x.mean_axis(Axis(0)).expect("nonempty");
    let xc = x - &mean;
    let cov = xc.t().dot(&xc) / (n as f64 - 1.0);
    let eig = SymmetricEigen::new(DMatrix::from_fn(d, d, |i, j| cov[[i, j]]));
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let total: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0)).sum();
    let scale = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
    let mut coords = Array2::zeros((n, dims));
    let mut explained = Vec::with_capacity(dims);
    let mut rank_deficient = false;
    for (c, &k) in order.iter().take(dims).enumerate() {
        let lambda = eig.eigenvalues[k];
        if lambda <= 1e-12 * scale || total == 0.0 {
            rank_deficient = true;
            explained.push(0.0);
            continue;
        }
        let mut v = Array1::from_iter(eig.eigenvectors.column(k).iter().copied());
        // Fix the sign: largest-magnitude loading positive.
        let pivot = v.iter().copied().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
        if pivot < 0.0 {
            v.mapv_inplace(|x| -x);
        }
        coords.column_mut(c).assign(&xc.dot(&v));
        explained.push(lambda / total);
    }
    Ok(Projection { method: ProjectionMethod::Pca, coords, explained, rank_deficient })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TsneInit {
    Pca,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub early_exaggeration: f64,
    pub exaggeration_iters: usize,
    pub init: TsneInit,
}

impl Default for TsneConfig {
    fn default() -> Self {
        Self {
            perplexity: 30.0,
            iterations: 1000,
            learning_rate: 200.0,
            early_exaggeration: 12.0,
            exaggeration_iters: 250,
            init: TsneInit::Pca,
        }
    }
}

fn sq_distances(x: &Array2<f64>) -> Array2<f64> {
    let sq = x.map_axis(Axis(1), |r| r.dot(&r));
    let g = x.dot(&x.t());
    Array2::from_shape_fn(g.raw_dim(), |(i, j)| if i == j { 0.0 } else { (sq[i] + sq[j] - 2.0 * g[[i, j]]).max(0.0) })
}

/// Conditional affinities for one row, bisecting the Gaussian precision
/// until the row entropy matches `ln(perplexity)`.
fn row_affinities(d: ndarray::ArrayView1<f64>, i: usize, perplexity: f64) -> Vec<f64> {
    let target = perplexity.ln();
    let (mut lo, mut hi, mut beta) = (0.0f64, f64::INFINITY, 1.0f64);
    let mut p = vec![0.0; d.len()];
    let dmin = d.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, &v)| v).fold(f64::INFINITY, f64::min);
    for _ in 0..200 {
        let mut sum = 0.0;
        for (j, &v) in d.iter().enumerate() {
            p[j] = if j == i { 0.0 } else { (-(v - dmin) * beta).exp() };
            sum += p[j];
        }
        let h = beta * d.iter().zip(&p).map(|(v, pj)| (v - dmin) * pj).sum::<f64>() / sum + sum.ln();
        p.iter_mut().for_each(|v| *v /= sum);
        if (h - target).abs() < 1e-10 {
            break;
        }
        if h > target {
            lo = beta;
            beta = if hi.is_finite() { (beta + hi) / 2.0 } else { beta * 2.0 };
        } else {
            hi = beta;
            beta = (beta + lo) / 2.0;
        }
    }
    p
}

/// Exact t-SNE to two dimensions, minimising KL(P || Q) with a Student-t
/// kernel by gradient descent with momentum and per-coordinate gains.
pub fn tsne_project(x: &Array2<f64>, cfg: &TsneConfig, seed: u64) -> Result<Projection> {
    let n = x.nrows();
    if n < 4 {
        return Err(Error::invalid(format!("t-SNE needs at least 4 items, got {n}")));
    }
    if !(cfg.perplexity > 0.0) || cfg.perplexity >= (n - 1) as f64 {
        return Err(Error::invalid(format!("perplexity {} must lie in (0, {})", cfg.perplexity, n - 1)));
    }
    let d = sq_distances(x);
    let rows = par::map_range(n, |i| row_affinities(d.row(i), i, cfg.perplexity));
    let mut p = Array2::from_shape_fn((n, n), |(i, j)| rows[i][j]);
    let pt = p.t().to_owned();
    p = (p + pt) / (2.0 * n as f64);
    p.mapv_inplace(|v| v.max(1e-12));
    p.diag_mut().fill(0.0);

    let mut y = match cfg.init {
        TsneInit::Pca => {
            let pc = pca_project(x, 2)?.coords;
            let sd = pc.column(0).std(0.0);
            if sd > 0.0 {
                pc * (1e-4 / sd)
            } else {
                random_init(n, seed)
            }
        }
        TsneInit::Random => random_init(n, seed),
    };
    let lr = effective_learning_rate(cfg, n);
    let mut update = Array2::<f64>::zeros((n, 2));
    let mut gains = Array2::<f64>::ones((n, 2));
    for it in 0..cfg.iterations {
        let exag = if it < cfg.exaggeration_iters { cfg.early_exaggeration } else { 1.0 };
        let momentum = if it < cfg.exaggeration_iters { 0.5 } else { 0.8 };
        let grad = tsne_gradient(&p, &y, exag);
        // Gains may not push the per-coordinate step past the stability
        // bound of the current phase.
        let max_gain = (n as f64 / (4.0 * exag) / lr).max(1.0);
        for ((g, u), gain) in grad.iter().zip(update.iter()).zip(gains.iter_mut()) {
            let next = if (*g > 0.0) != (*u > 0.0) { *gain + 0.2 } else { *gain * 0.8 };
            *gain = next.clamp(0.01, max_gain);
        }
        update = &update * momentum - &(&grad * &gains) * lr;
        y += &update;
        let mean = y.mean_axis(Axis(0)).expect("nonempty");
        y -= &mean;
    }
    Ok(Projection { method: ProjectionMethod::Tsne, coords: y, explained: Vec::new(), rank_deficient: false })
}

/// The configured rate, capped at `n / (4 * exaggeration)`: above that the
/// exaggerated attraction overshoots and small sets diverge.
pub fn effective_learning_rate(cfg: &TsneConfig, n: usize) -> f64 {
    cfg.learning_rate.min(n as f64 / (4.0 * cfg.early_exaggeration.max(1.0)))
}

fn random_init(n: usize, seed: u64) -> Array2<f64> {
    let mut r = rng::seeded(seed);
    let normal = Normal::new(0.0, 1e-4).expect("valid");
    Array2::from_shape_fn((n, 2), |_| normal.sample(&mut r))
}

fn tsne_gradient(p: &Array2<f64>, y: &Array2<f64>, exag: f64) -> Array2<f64> {
    let n = y.nrows();
    let num = Array2::from_shape_fn((n, n), |(i, j)| {
        if i == j {
            0.0
        } else {
            let (dx, dy) = (y[[i, 0]] - y[[j, 0]], y[[i, 1]] - y[[j, 1]]);
            1.0 / (1.0 + dx * dx + dy * dy)
        }
    });
    let z: f64 = num.sum().max(f64::MIN_POSITIVE);
    let rows = par::map_range(n, |i| {
        let mut g = [0.0; 2];
        for j in 0..n {
            if i == j {
                continue;
            }
            let w = (exag * p[[i, j]] - num[[i, j]] / z) * num[[i, j]];
            g[0] += 4.0 * w * (y[[i, 0]] - y[[j, 0]]);
            g[1] += 4.0 * w * (y[[i, 1]] - y[[j, 1]]);
        }
        g
    });
    Array2::from_shape_fn((n, 2), |(i, c)| rows[i][c])
}

/// Mean silhouette coefficient under Euclidean distance.
pub fn silhouette(x: &Array2<f64>, labels: &[usize]) -> f64 {
    let d = sq_distances(x).mapv(f64::sqrt);
    let n = x.nrows();
    let mut total = 0.0;
    for i in 0..n {
        let mut sums = std::collections::BTreeMap::<usize, (f64, usize)>::new();
        for j in 0..n {
            if i != j {
                let e = sums.entry(labels[j]).or_default();
                e.0 += d[[i, j]];
                e.1 += 1;
            }
        }
        let a = sums.get(&labels[i]).map_or(0.0, |(s, c)| s / *c as f64);
        let b = sums
            .iter()
            .filter(|(l, _)| **l != labels[i])
            .map(|(_, (s, c))| s / *c as f64)
            .fold(f64::INFINITY, f64::min);
        if sums.get(&labels[i]).is_some() && b.is_finite() {
            total += (b - a) / a.max(b);
        }
    }
    total / n as f64
}

/// Centroid cosine similarities ordered by a dendrogram's leaves.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub labels: Vec<String>,
    pub matrix: Array2<f64>,
}

pub fn similarity_heatmap(centroids: &[(String, Array1<f64>)], order: &[usize]) -> Result<Heatmap> {
    if centroids.len() < 2 {
        return Err(Error::invalid("a heatmap needs at least two scripts"));
    }
    let mut seen = order.to_vec();
    seen.sort_unstable();
    if seen != (0..centroids.len()).collect::<Vec<_>>() {
        return Err(Error::invalid("leaf order must be a permutation of the scripts"));
    }
    let k = order.len();
    let mut matrix = Array2::from_shape_fn((k, k), |(a, b)| cosine(&centroids[order[a]].1, &centroids[order[b]].1));
    matrix.diag_mut().fill(1.0);
    let labels = order.iter().map(|&i| centroids[i].0.clone()).collect();
    Ok(Heatmap { labels, matrix })
}
