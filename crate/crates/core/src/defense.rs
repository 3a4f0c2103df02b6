//! Defense probes: STRIP overlay-entropy scoring, activation clustering
//! with silhouette scores, and the byzantine-robust aggregation rules
//! (Krum, coordinate-wise trimmed mean).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{pca_embed, DownstreamProbe};
use crate::federation::ClientUpdate;
use crate::tensor::nn::ParamSet;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct StripConfig {
    /// Overlays blended per scored sample.
    pub overlays: usize,
    /// Blend weight of the overlay image.
    pub blend_ratio: f64,
}

impl Default for StripConfig {
    fn default() -> Self {
        StripConfig {
            overlays: 32,
            blend_ratio: 0.5,
        }
    }
}

impl StripConfig {
    pub fn validate(&self) -> Result<()> {
        if self.overlays == 0 {
            return Err(Error::contract("overlay count must be >= 1"));
        }
        if !(self.blend_ratio > 0.0 && self.blend_ratio < 1.0) {
            return Err(Error::contract("blend ratio must lie in (0,1)"));
        }
        Ok(())
    }
}

/// Average prediction entropy of `x` blended with random overlay images:
/// low entropy under perturbation marks trigger-dominated inputs.
pub fn strip_entropy(
    probe: &DownstreamProbe,
    x: &Tensor,
    overlay_pool: &[Tensor],
    cfg: &StripConfig,
    rng: &mut impl Rng,
) -> Result<f64> {
    cfg.validate()?;
    if overlay_pool.is_empty() {
        return Err(Error::contract("overlay pool must be nonempty"));
    }
    let mut blends = Vec::with_capacity(cfg.overlays);
    for _ in 0..cfg.overlays {
        let o = &overlay_pool[rng.gen_range(0..overlay_pool.len())];
        if o.shape() != x.shape() {
            return Err(Error::contract("overlay shape mismatch"));
        }
        let mut blend = x.clone();
        for (b, ov) in blend.data_mut().iter_mut().zip(o.data()) {
            *b = (1.0 - cfg.blend_ratio) * *b + cfg.blend_ratio * ov;
        }
        blends.push(blend);
    }
    let batch = Tensor::stack(&blends.iter().collect::<Vec<_>>());
    let probs = probe.probabilities(&batch);
    Ok(mean_row_entropy(&probs))
}

/// Mean Shannon entropy (nats) of probability rows.
pub fn mean_row_entropy(probs: &Tensor) -> f64 {
    let (n, k) = (probs.shape()[0], probs.shape()[1]);
    let mut total = 0.0;
    for i in 0..n {
        let mut h = 0.0;
        for j in 0..k {
            let p = probs.data()[i * k + j];
            if p > 0.0 {
                h -= p * p.ln();
            }
        }
        total += h;
    }
    total / n as f64
}

/// Rank-based AUC of the detection rule "poisoned samples score lower":
/// `P(score_poisoned < score_clean) + 0.5 P(tie)`.
pub fn detection_auc(poisoned_scores: &[f64], clean_scores: &[f64]) -> Result<f64> {
    if poisoned_scores.is_empty() || clean_scores.is_empty() {
        return Err(Error::contract("AUC needs both score lists nonempty"));
    }
    // Rank over the pooled list (average ranks over ties).
    let mut pooled: Vec<(f64, bool)> = poisoned_scores
        .iter()
        .map(|&s| (s, true))
        .chain(clean_scores.iter().map(|&s| (s, false)))
        .collect();
    pooled.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite scores"));
    let n = pooled.len();
    let mut rank_sum_poisoned = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && pooled[j + 1].0 == pooled[i].0 {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        for entry in pooled.iter().take(j + 1).skip(i) {
            if entry.1 {
                rank_sum_poisoned += avg_rank;
            }
        }
        i = j + 1;
    }
    let np = poisoned_scores.len() as f64;
    let nc = clean_scores.len() as f64;
    // Mann-Whitney U for "poisoned below clean".
    let u_low = np * nc + np * (np + 1.0) / 2.0 - rank_sum_poisoned;
    Ok(u_low / (np * nc))
}

/// Per-class activation-clustering verdict.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassClusterReport {
    pub class: usize,
    pub silhouette: f64,
    /// Sample count in each of the two clusters.
    pub cluster_sizes: [usize; 2],
    /// Indices (into the class's sample list) of the smaller cluster, the
    /// suspected-poisoned side.
    pub flagged: Vec<usize>,
    /// True when all features were identical and the silhouette degenerated
    /// to the defined 0.
    pub degenerate: bool,
}

/// Two-means clustering with silhouette scoring of per-class features,
/// after reduction to at most 10 principal components.
pub fn activation_clustering(
    features_by_class: &[(usize, Tensor)],
    rng: &mut impl Rng,
) -> Result<Vec<ClassClusterReport>> {
    let mut out = Vec::with_capacity(features_by_class.len());
    for (class, feats) in features_by_class {
        if feats.ndim() != 2 {
            return Err(Error::contract("per-class features must be [n,d]"));
        }
        let n = feats.shape()[0];
        if n < 4 {
            return Err(Error::contract(format!(
                "class {class} has {n} samples; clustering needs at least 4"
            )));
        }
        let d = feats.shape()[1];
        // Degenerate class: identical rows.
        let first = &feats.data()[..d];
        let identical = (1..n).all(|i| {
            feats.data()[i * d..(i + 1) * d]
                .iter()
                .zip(first)
                .all(|(a, b)| a == b)
        });
        if identical {
            out.push(ClassClusterReport {
                class: *class,
                silhouette: 0.0,
                cluster_sizes: [n, 0],
                flagged: Vec::new(),
                degenerate: true,
            });
            continue;
        }
        let k = 10.min(d).min(n - 1);
        let reduced = pca_embed(feats, k)?.coords;
        let assign = kmeans2(&reduced, rng);
        let sil = silhouette2(&reduced, &assign);
        let c1 = assign.iter().filter(|&&a| a == 1).count();
        let c0 = assign.len() - c1;
        let minority = usize::from(c1 < c0);
        let flagged: Vec<usize> = assign
            .iter()
            .enumerate()
            .filter(|(_, &a)| a == minority)
            .map(|(i, _)| i)
            .collect();
        out.push(ClassClusterReport {
            class: *class,
            silhouette: sil,
            cluster_sizes: [c0, c1],
            flagged,
            degenerate: false,
        });
    }
    Ok(out)
}

/// Lloyd's algorithm with k = 2, seeded initialization, at most 100
/// iterations.
fn kmeans2(points: &Tensor, rng: &mut impl Rng) -> Vec<usize> {
    let (n, d) = (points.shape()[0], points.shape()[1]);
    let row = |i: usize| &points.data()[i * d..(i + 1) * d];
    let a = rng.gen_range(0..n);
    let mut b = rng.gen_range(0..n);
    // Distinct starting points (fall back to scanning on collision).
    if b == a {
        b = (a + 1) % n;
    }
    let mut centers = [row(a).to_vec(), row(b).to_vec()];
    let mut assign = vec![0usize; n];
    for _iter in 0..100 {
        let mut changed = false;
        for i in 0..n {
            let d0: f64 = row(i)
                .iter()
                .zip(&centers[0])
                .map(|(x, c)| (x - c) * (x - c))
                .sum();
            let d1: f64 = row(i)
                .iter()
                .zip(&centers[1])
                .map(|(x, c)| (x - c) * (x - c))
                .sum();
            let na = usize::from(d1 < d0);
            if na != assign[i] {
                assign[i] = na;
                changed = true;
            }
        }
        // Recompute centers; re-seed an emptied cluster with the farthest
        // point from the other center.
        for c in 0..2 {
            let members: Vec<usize> = (0..n).filter(|&i| assign[i] == c).collect();
            if members.is_empty() {
                let other = &centers[1 - c];
                let far = (0..n)
                    .max_by(|&p, &q| {
                        let dp: f64 = row(p)
                            .iter()
                            .zip(other)
                            .map(|(x, cc)| (x - cc) * (x - cc))
                            .sum();
                        let dq: f64 = row(q)
                            .iter()
                            .zip(other)
                            .map(|(x, cc)| (x - cc) * (x - cc))
                            .sum();
                        dp.partial_cmp(&dq).expect("finite")
                    })
                    .expect("nonempty points");
                centers[c] = row(far).to_vec();
                assign[far] = c;
                continue;
            }
            let mut center = vec![0.0; d];
            for &i in &members {
                for (cc, v) in center.iter_mut().zip(row(i)) {
                    *cc += v;
                }
            }
            for cc in center.iter_mut() {
                *cc /= members.len() as f64;
            }
            centers[c] = center;
        }
        if !changed {
            break;
        }
    }
    assign
}

/// Mean silhouette over all samples for a 2-clustering; singleton-cluster
/// samples contribute 0.
fn silhouette2(points: &Tensor, assign: &[usize]) -> f64 {
    let (n, d) = (points.shape()[0], points.shape()[1]);
    let row = |i: usize| &points.data()[i * d..(i + 1) * d];
    let dist = |i: usize, j: usize| -> f64 {
        row(i)
            .iter()
            .zip(row(j))
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    };
    let mut total = 0.0;
    for i in 0..n {
        let own: Vec<usize> = (0..n)
            .filter(|&j| j != i && assign[j] == assign[i])
            .collect();
        let other: Vec<usize> = (0..n).filter(|&j| assign[j] != assign[i]).collect();
        if own.is_empty() || other.is_empty() {
            continue; // s(i) = 0
        }
        let a: f64 = own.iter().map(|&j| dist(i, j)).sum::<f64>() / own.len() as f64;
        let b: f64 = other.iter().map(|&j| dist(i, j)).sum::<f64>() / other.len() as f64;
        let denom = a.max(b);
        if denom > 0.0 {
            total += (b - a) / denom;
        }
    }
    total / n as f64
}

/// Krum: select the single update minimizing the sum of squared distances
/// to its `n - f - 2` nearest neighbors; requires `n >= 2f + 3`.
pub fn krum_aggregate(updates: &[ClientUpdate], f: usize) -> Result<ParamSet> {
    let n = updates.len();
    if n < 2 * f + 3 {
        return Err(Error::contract(format!(
            "krum needs n >= 2f + 3 (n = {n}, f = {f})"
        )));
    }
    let first = &updates[0];
    for u in updates {
        if !u.params.same_layout(&first.params) {
            return Err(Error::Aggregation {
                client: u.client_id,
                detail: "parameter shapes do not match the other updates".to_string(),
            });
        }
    }
    let flats: Vec<Vec<f64>> = updates.iter().map(|u| u.params.flatten()).collect();
    let neighbors = n - f - 2;
    let mut best: Option<(f64, usize)> = None;
    // Deterministic over input order: iterate in client-id order.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| updates[i].client_id);
    for &i in &order {
        let mut dists: Vec<f64> = order
            .iter()
            .filter(|&&j| j != i)
            .map(|&j| {
                flats[i]
                    .iter()
                    .zip(&flats[j])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
            })
            .collect();
        dists.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
        let score: f64 = dists.iter().take(neighbors).sum();
        if best.map_or(true, |(s, _)| score < s) {
            best = Some((score, i));
        }
    }
    let (_, chosen) = best.expect("nonempty updates");
    Ok(updates[chosen].params.clone())
}

/// Coordinate-wise mean after dropping the `k` largest and `k` smallest
/// values per coordinate; requires `2k < n`.
pub fn trimmed_mean_aggregate(updates: &[ClientUpdate], k: usize) -> Result<ParamSet> {
    let n = updates.len();
    if n == 0 {
        return Err(Error::contract("trimmed mean needs at least one update"));
    }
    if 2 * k >= n {
        return Err(Error::contract(format!(
            "trimmed mean needs 2k < n (n = {n}, k = {k})"
        )));
    }
    let first = &updates[0];
    for u in updates {
        if !u.params.same_layout(&first.params) {
            return Err(Error::Aggregation {
                client: u.client_id,
                detail: "parameter shapes do not match the other updates".to_string(),
            });
        }
    }
    let flats: Vec<Vec<f64>> = updates.iter().map(|u| u.params.flatten()).collect();
    let dim = flats[0].len();
    let mut acc = vec![0.0; dim];
    let mut column = vec![0.0; n];
    for c in 0..dim {
        for (r, flat) in flats.iter().enumerate() {
            column[r] = flat[c];
        }
        column.sort_by(|a, b| a.partial_cmp(b).expect("finite parameters"));
        let kept = &column[k..n - k];
        acc[c] = kept.iter().sum::<f64>() / kept.len() as f64;
    }
    let mut out = first.params.clone();
    out.assign_flat(&acc);
    Ok(out)
}

/// Text-report payload of a defense run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DefenseVerdict {
    pub probe: String,
    pub detection_auc: Option<f64>,
    pub per_class: Vec<ClassClusterReport>,
    pub flagged_samples: Vec<usize>,
}

impl DefenseVerdict {
    pub fn validate(&self) -> Result<()> {
        if let Some(auc) = self.detection_auc {
            if !(0.0..=1.0).contains(&auc) {
                return Err(Error::contract("detection AUC must lie in [0,1]"));
            }
        }
        Ok(())
    }
}
