//! K-means pseudo labels over the global and fused views, and agreement
//! diagnostics between views.

use ndarray::{Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{rejected, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterConfig {
    /// Number of pseudo identities, shared by every view.
    pub clusters: usize,
    pub max_iter: usize,
    pub restarts: usize,
    /// Derived from the run seed during training, so not read from config files.
    #[serde(skip)]
    pub seed: u64,
    /// L2-normalize vectors before clustering.
    pub normalize: bool,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self { clusters: 700, max_iter: 300, restarts: 3, seed: 0, normalize: true }
    }
}

impl ClusterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.clusters == 0 {
            return Err(Error::Config("cluster count must be positive".into()));
        }
        if self.restarts == 0 || self.max_iter == 0 {
            return Err(Error::Config("restarts and max_iter must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub labels: Vec<usize>,
    /// `k x d`
    pub centroids: Array2<f64>,
    /// Within-cluster sum of squared distances.
    pub sse: f64,
    pub iterations: usize,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn rows(points: &ArrayView2<'_, f64>) -> Vec<Vec<f64>> {
    points.rows().into_iter().map(|r| r.to_vec()).collect()
}

/// k-means++ seeding.
fn plus_plus_init(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut centroids = Vec::with_capacity(k);
    centroids.push(points[rng.random_range(0..n)].clone());
    let mut best: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = best.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = n - 1;
            for (i, &d) in best.iter().enumerate() {
                acc += d;
                if acc > target {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        let c = points[pick].clone();
        for (b, p) in best.iter_mut().zip(points) {
            *b = b.min(sq_dist(p, &c));
        }
        centroids.push(c);
    }
    centroids
}

fn nearest(p: &[f64], centroids: &[Vec<f64>], current: Option<usize>) -> usize {
    let mut best_idx = current.unwrap_or(0);
    let mut best = sq_dist(p, &centroids[best_idx]);
    for (j, c) in centroids.iter().enumerate() {
        let d = sq_dist(p, c);
        // Strict improvement: ties keep the current cluster, or the lowest index.
        if d < best {
            best = d;
            best_idx = j;
        }
    }
    best_idx
}

fn means(points: &[Vec<f64>], labels: &[usize], k: usize, dim: usize) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (p, &l) in points.iter().zip(labels) {
        counts[l] += 1;
        for (s, v) in sums[l].iter_mut().zip(p) {
            *s += v;
        }
    }
    for (s, &c) in sums.iter_mut().zip(&counts) {
        if c > 0 {
            for v in s.iter_mut() {
                *v /= c as f64;
            }
        }
    }
    (sums, counts)
}

/// Moves the point farthest from its centroid into each empty cluster.
/// Returns true if anything moved.
fn repair_empty(points: &[Vec<f64>], labels: &mut [usize], centroids: &mut [Vec<f64>], counts: &mut [usize]) -> bool {
    let mut moved = false;
    let dim = points[0].len();
    for empty in 0..centroids.len() {
        if counts[empty] > 0 {
            continue;
        }
        let mut far: Option<(usize, f64)> = None;
        for (i, p) in points.iter().enumerate() {
            if counts[labels[i]] < 2 {
                continue;
            }
            let d = sq_dist(p, &centroids[labels[i]]);
            if far.is_none_or(|(_, best)| d > best) {
                far = Some((i, d));
            }
        }
        let Some((i, _)) = far else { break };
        let donor = labels[i];
        labels[i] = empty;
        counts[donor] -= 1;
        counts[empty] = 1;
        centroids[empty] = points[i].clone();
        let (m, _) = means(points, labels, centroids.len(), dim);
        centroids[donor] = m[donor].clone();
        moved = true;
    }
    moved
}

fn lloyd(points: &[Vec<f64>], k: usize, max_iter: usize, rng: &mut ChaCha8Rng) -> KMeansResult {
    let dim = points[0].len();
    let mut centroids = plus_plus_init(points, k, rng);
    let mut labels: Vec<usize> = points.iter().map(|p| nearest(p, &centroids, None)).collect();
    let mut iterations = 0;
    loop {
        iterations += 1;
        let (m, mut counts) = means(points, &labels, k, dim);
        for (c, (new, &cnt)) in centroids.iter_mut().zip(m.into_iter().zip(&counts)) {
            if cnt > 0 {
                *c = new;
            }
        }
        let repaired = repair_empty(points, &mut labels, &mut centroids, &mut counts);
        let mut changed = repaired;
        for (i, p) in points.iter().enumerate() {
            let l = nearest(p, &centroids, Some(labels[i]));
            if l != labels[i] {
                labels[i] = l;
                changed = true;
            }
        }
        if !changed || iterations >= max_iter {
            if changed {
                let (m, counts) = means(points, &labels, k, dim);
                for (c, (new, &cnt)) in centroids.iter_mut().zip(m.into_iter().zip(&counts)) {
                    if cnt > 0 {
                        *c = new;
                    }
                }
            }
            break;
        }
    }
    let sse = points.iter().zip(&labels).map(|(p, &l)| sq_dist(p, &centroids[l])).sum();
    let flat: Vec<f64> = centroids.into_iter().flatten().collect();
    KMeansResult {
        labels,
        centroids: Array2::from_shape_vec((k, dim), flat).expect("k x dim"),
        sse,
        iterations,
    }
}

/// Lloyd's algorithm with k-means++ seeding; best of `restarts` by SSE.
///
/// Deterministic given `seed`. Empty clusters are repaired so every label in
/// `[0, k)` is used.
pub fn kmeans(points: ArrayView2<'_, f64>, k: usize, max_iter: usize, restarts: usize, seed: u64) -> Result<KMeansResult> {
    let n = points.nrows();
    if k == 0 {
        return Err(rejected("k must be positive"));
    }
    if k > n {
        return Err(rejected(format!("cannot form {k} clusters from {n} points")));
    }
    if points.iter().any(|v| !v.is_finite()) {
        return Err(rejected("clustering input contains non-finite values"));
    }
    let pts = rows(&points);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<KMeansResult> = None;
    for _ in 0..restarts.max(1) {
        let run = lloyd(&pts, k, max_iter.max(1), &mut rng);
        if best.as_ref().is_none_or(|b| run.sse < b.sse) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}

pub fn l2_normalize_rows(points: &mut Array2<f64>) {
    for mut row in points.rows_mut() {
        let norm = row.dot(&row).sqrt();
        if norm > 0.0 {
            row.mapv_inplace(|v| v / norm);
        }
    }
}

/// Per-view pseudo labels for every target sample. View 0 is the global
/// feature, view `j >= 1` the fused feature of part `j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelSets {
    pub views: Vec<Vec<usize>>,
    pub clusters: Vec<usize>,
}

impl PseudoLabelSets {
    pub fn num_views(&self) -> usize {
        self.views.len()
    }

    pub fn num_samples(&self) -> usize {
        self.views.first().map_or(0, Vec::len)
    }

    /// All labels of sample `i`, one per view.
    pub fn sample(&self, i: usize) -> Vec<usize> {
        self.views.iter().map(|v| v[i]).collect()
    }

    /// ARI between view 0 and each other view.
    pub fn consistency(&self) -> Result<Vec<f64>> {
        self.views.iter().skip(1).map(|v| consistency_ari(&self.views[0], v)).collect()
    }

    pub fn cluster_sizes(&self, view: usize) -> Vec<usize> {
        let mut sizes = vec![0usize; self.clusters[view]];
        for &l in &self.views[view] {
            sizes[l] += 1;
        }
        sizes
    }
}

/// Clusters each view with the same cluster count. Views must be aligned to the same samples.
pub fn build_pseudo_datasets(global: ArrayView2<'_, f64>, fused: &[Array2<f64>], cfg: &ClusterConfig) -> Result<PseudoLabelSets> {
    cfg.validate()?;
    let n = global.nrows();
    if let Some(bad) = fused.iter().find(|f| f.nrows() != n) {
        return Err(rejected(format!("view has {} samples, global view has {n}", bad.nrows())));
    }
    let mut views = Vec::with_capacity(fused.len() + 1);
    for (v, feats) in std::iter::once(global).chain(fused.iter().map(|f| f.view())).enumerate() {
        let mut x = feats.to_owned();
        if cfg.normalize {
            l2_normalize_rows(&mut x);
        }
        let seed = cfg.seed.wrapping_mul(1_000_003).wrapping_add(v as u64);
        views.push(kmeans(x.view(), cfg.clusters, cfg.max_iter, cfg.restarts, seed)?.labels);
    }
    let clusters = vec![cfg.clusters; views.len()];
    Ok(PseudoLabelSets { views, clusters })
}

fn comb2(x: u64) -> f64 {
    (x as f64) * (x as f64 - 1.0) / 2.0
}

/// Adjusted Rand index between two labelings of the same samples.
pub fn consistency_ari(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(rejected(format!("label lists differ in length: {} vs {}", a.len(), b.len())));
    }
    if a.len() < 2 {
        return Err(rejected("ARI needs at least two samples"));
    }
    let ka = a.iter().max().unwrap() + 1;
    let kb = b.iter().max().unwrap() + 1;
    let mut table = Array2::<u64>::zeros((ka, kb));
    for (&x, &y) in a.iter().zip(b) {
        table[[x, y]] += 1;
    }
    let index: f64 = table.iter().map(|&c| comb2(c)).sum();
    let row_sum: f64 = table.sum_axis(Axis(1)).iter().map(|&c| comb2(c)).sum();
    let col_sum: f64 = table.sum_axis(Axis(0)).iter().map(|&c| comb2(c)).sum();
    let total = comb2(a.len() as u64);
    let expected = row_sum * col_sum / total;
    let max_index = 0.5 * (row_sum + col_sum);
    if max_index == expected {
        // Both partitions trivial (all singletons or one block): agreement is perfect.
        return Ok(1.0);
    }
    Ok((index - expected) / (max_index - expected))
}

/// Fraction of samples whose cluster's majority ground-truth identity matches their own.
pub fn cluster_purity(labels: &[usize], truth: &[usize]) -> Result<f64> {
    if labels.len() != truth.len() || labels.is_empty() {
        return Err(rejected("purity needs equal-length, non-empty label lists"));
    }
    let mut table: std::collections::BTreeMap<usize, std::collections::BTreeMap<usize, usize>> = Default::default();
    for (&l, &t) in labels.iter().zip(truth) {
        *table.entry(l).or_default().entry(t).or_default() += 1;
    }
    let hits: usize = table.values().map(|m| m.values().copied().max().unwrap_or(0)).sum();
    Ok(hits as f64 / labels.len() as f64)
}
