//! Identity classification and triplet objectives with batch-hard mining.
//!
//! Each loss comes with a gradient routine. Mining indices are treated as
//! constants when differentiating, as is standard for batch-hard triplets.

use ndarray::{Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{rejected, Error, Result};
use crate::nn::sigmoid;

/// Weights of the combined target objective and the triplet margin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// Weight of the global re-identification term.
    pub alpha: f64,
    /// Weight of the hinge triplet inside the global term (also used at pretraining).
    pub lambda: f64,
    /// Weight of the per-part softmax triplet terms.
    pub gamma: f64,
    pub margin: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { alpha: 1.0, lambda: 0.5, gamma: 0.5, margin: 0.3 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("lambda", self.lambda), ("gamma", self.gamma), ("margin", self.margin)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("loss weight {name} = {v} must be finite and non-negative")));
            }
        }
        Ok(())
    }
}

/// Hardest positive and negative for each mined anchor.
#[derive(Debug, Clone, PartialEq)]
pub struct MiningResult {
    pub anchors: Vec<usize>,
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
    pub pos_dist: Vec<f64>,
    pub neg_dist: Vec<f64>,
}

impl MiningResult {
    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    /// Builds a result from explicit anchor distances (no embeddings).
    pub fn from_distances(pos_dist: Vec<f64>, neg_dist: Vec<f64>) -> Self {
        let n = pos_dist.len();
        Self {
            anchors: (0..n).collect(),
            positives: vec![0; n],
            negatives: vec![0; n],
            pos_dist,
            neg_dist,
        }
    }
}

/// Mean cross-entropy of `softmax(logits)` against integer labels.
pub fn cross_entropy_cls(logits: ArrayView2<'_, f64>, labels: &[usize]) -> Result<f64> {
    Ok(cross_entropy_with_grad(logits, labels)?.0)
}

/// Loss and `d loss / d logits`.
pub fn cross_entropy_with_grad(logits: ArrayView2<'_, f64>, labels: &[usize]) -> Result<(f64, Array2<f64>)> {
    let (n, m) = logits.dim();
    if n == 0 {
        return Err(rejected("cross-entropy on an empty batch"));
    }
    if labels.len() != n {
        return Err(rejected(format!("{} labels for {n} logit rows", labels.len())));
    }
    let mut grad = Array2::<f64>::zeros((n, m));
    let mut total = 0.0;
    for (i, (row, &y)) in logits.rows().into_iter().zip(labels).enumerate() {
        if y >= m {
            return Err(rejected(format!("label {y} outside [0, {m})")));
        }
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let sum: f64 = row.iter().map(|&v| (v - max).exp()).sum();
        let log_z = max + sum.ln();
        total += log_z - row[y];
        for (k, &v) in row.iter().enumerate() {
            grad[[i, k]] = (v - log_z).exp() / n as f64;
        }
        grad[[i, y]] -= 1.0 / n as f64;
    }
    Ok((total / n as f64, grad))
}

pub fn l2_distance(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn pairwise_distances(emb: ArrayView2<'_, f64>) -> Array2<f64> {
    let n = emb.nrows();
    let mut d = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in (i + 1)..n {
            let v = l2_distance(emb.row(i), emb.row(j));
            d[[i, j]] = v;
            d[[j, i]] = v;
        }
    }
    d
}

/// Index and distance of a mined sample.
type Pick = Option<(usize, f64)>;

fn mine_anchor(dist: &Array2<f64>, labels: &[usize], i: usize) -> (Pick, Pick) {
    let mut pos: Option<(usize, f64)> = None;
    let mut neg: Option<(usize, f64)> = None;
    for j in 0..labels.len() {
        if j == i {
            continue;
        }
        let d = dist[[i, j]];
        if labels[j] == labels[i] {
            if pos.is_none_or(|(_, best)| d > best) {
                pos = Some((j, d));
            }
        } else if neg.is_none_or(|(_, best)| d < best) {
            neg = Some((j, d));
        }
    }
    (pos, neg)
}

/// Batch-hard mining over every anchor; ties resolve to the lowest index.
///
/// Every label must occur at least twice and at least two labels must be present.
pub fn batch_hard_mine(emb: ArrayView2<'_, f64>, labels: &[usize]) -> Result<MiningResult> {
    let n = emb.nrows();
    if labels.len() != n {
        return Err(Error::RejectedBatch(format!("{} labels for {n} embeddings", labels.len())));
    }
    let mut counts = std::collections::BTreeMap::new();
    for &l in labels {
        *counts.entry(l).or_insert(0usize) += 1;
    }
    if counts.len() < 2 {
        return Err(Error::RejectedBatch("batch needs at least two distinct labels".into()));
    }
    if let Some((l, _)) = counts.iter().find(|(_, &c)| c < 2) {
        return Err(Error::RejectedBatch(format!("label {l} appears only once")));
    }
    let mined = mine_available(emb, labels)?;
    debug_assert_eq!(mined.len(), n);
    Ok(mined)
}

/// Batch-hard mining that skips anchors without a positive or a negative.
///
/// Used for auxiliary label views, where a batch balanced on one view may
/// contain singletons of another.
pub fn mine_available(emb: ArrayView2<'_, f64>, labels: &[usize]) -> Result<MiningResult> {
    let n = emb.nrows();
    if labels.len() != n {
        return Err(Error::RejectedBatch(format!("{} labels for {n} embeddings", labels.len())));
    }
    let dist = pairwise_distances(emb);
    let mut out = MiningResult { anchors: vec![], positives: vec![], negatives: vec![], pos_dist: vec![], neg_dist: vec![] };
    for i in 0..n {
        if let (Some((p, dp)), Some((q, dn))) = mine_anchor(&dist, labels, i) {
            out.anchors.push(i);
            out.positives.push(p);
            out.negatives.push(q);
            out.pos_dist.push(dp);
            out.neg_dist.push(dn);
        }
    }
    Ok(out)
}

/// Mean of `max(0, margin + d_ap - d_an)`; zero when nothing was mined.
pub fn hinge_triplet(mining: &MiningResult, margin: f64) -> f64 {
    if mining.is_empty() {
        return 0.0;
    }
    let sum: f64 = mining.pos_dist.iter().zip(&mining.neg_dist).map(|(p, n)| (margin + p - n).max(0.0)).sum();
    sum / mining.len() as f64
}

/// Mean of `-log(e^{d_an} / (e^{d_ap} + e^{d_an}))`, computed as `softplus(d_ap - d_an)`.
pub fn softmax_triplet(mining: &MiningResult) -> f64 {
    if mining.is_empty() {
        return 0.0;
    }
    let sum: f64 = mining.pos_dist.iter().zip(&mining.neg_dist).map(|(p, n)| softplus(p - n)).sum();
    sum / mining.len() as f64
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Scatters per-anchor distance gradients onto the embeddings.
fn distance_grad(emb: ArrayView2<'_, f64>, mining: &MiningResult, d_pos: &[f64], d_neg: &[f64]) -> Array2<f64> {
    let mut grad = Array2::<f64>::zeros(emb.raw_dim());
    let mut push = |a: usize, b: usize, dist: f64, coef: f64| {
        if coef == 0.0 || dist <= 1e-12 {
            return;
        }
        for c in 0..emb.ncols() {
            let g = coef * (emb[[a, c]] - emb[[b, c]]) / dist;
            grad[[a, c]] += g;
            grad[[b, c]] -= g;
        }
    };
    for k in 0..mining.len() {
        let a = mining.anchors[k];
        push(a, mining.positives[k], mining.pos_dist[k], d_pos[k]);
        push(a, mining.negatives[k], mining.neg_dist[k], d_neg[k]);
    }
    grad
}

pub fn hinge_triplet_grad(emb: ArrayView2<'_, f64>, mining: &MiningResult, margin: f64) -> Array2<f64> {
    let n = mining.len().max(1) as f64;
    let active: Vec<f64> = mining
        .pos_dist
        .iter()
        .zip(&mining.neg_dist)
        .map(|(p, q)| if margin + p - q > 0.0 { 1.0 / n } else { 0.0 })
        .collect();
    let neg: Vec<f64> = active.iter().map(|v| -v).collect();
    distance_grad(emb, mining, &active, &neg)
}

pub fn softmax_triplet_grad(emb: ArrayView2<'_, f64>, mining: &MiningResult) -> Array2<f64> {
    let n = mining.len().max(1) as f64;
    let d_pos: Vec<f64> = mining.pos_dist.iter().zip(&mining.neg_dist).map(|(p, q)| sigmoid(p - q) / n).collect();
    let d_neg: Vec<f64> = d_pos.iter().map(|v| -v).collect();
    distance_grad(emb, mining, &d_pos, &d_neg)
}

/// `alpha * (cls + lambda * tri) + gamma * sum(part_tri)`.
pub fn total_target_loss(cls: f64, tri: f64, part_tri: &[f64], w: &LossWeights) -> f64 {
    w.alpha * (cls + w.lambda * tri) + w.gamma * part_tri.iter().sum::<f64>()
}

/// `cls + lambda * tri`.
pub fn source_loss(cls: f64, tri: f64, lambda: f64) -> f64 {
    cls + lambda * tri
}
