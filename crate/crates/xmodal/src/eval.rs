//! Cross-modality retrieval evaluation (CMC Rank-k, mAP, both directions)
//! and cluster-quality diagnostics against the generator's ground truth.

use serde::Serialize;

use crate::cluster::{PseudoLabels, NOISE};
use crate::error::{Error, Result};
use crate::math::FeatureVec;
use crate::scalar::Scalar;

pub const CMC_RANKS: [usize; 3] = [1, 5, 10];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Direction {
    /// Infrared query, visible gallery.
    I2V,
    /// Visible query, infrared gallery.
    V2I,
}

#[derive(Debug, Clone, Serialize)]
pub struct RetrievalResult {
    pub direction: Direction,
    /// (k, CMC@k) for k in CMC_RANKS, clamped to the gallery size.
    pub rank_k: Vec<(usize, f64)>,
    pub map_score: f64,
    /// Rank (1-based) of the first correct gallery entry per query.
    pub per_query_ranks: Vec<usize>,
}

impl RetrievalResult {
    pub fn rank(&self, k: usize) -> f64 {
        self.rank_k
            .iter()
            .find(|(rk, _)| *rk == k)
            .map(|(_, v)| *v)
            .unwrap_or(0.0)
    }
}

/// Ranks the gallery per query by descending cosine similarity (features are
/// unit-norm, so by dot product) and scores CMC@k plus mean average
/// precision over all correct entries. Ties break toward the lower gallery
/// index.
pub fn evaluate<S: Scalar>(
    query_feats: &[FeatureVec<S>],
    gallery_feats: &[FeatureVec<S>],
    query_ids: &[u32],
    gallery_ids: &[u32],
    direction: Direction,
) -> Result<RetrievalResult> {
    assert_eq!(query_feats.len(), query_ids.len());
    assert_eq!(gallery_feats.len(), gallery_ids.len());
    assert!(!query_feats.is_empty() && !gallery_feats.is_empty());
    let orphans: Vec<u32> = {
        let mut o: Vec<u32> = query_ids
            .iter()
            .filter(|q| !gallery_ids.contains(q))
            .copied()
            .collect();
        o.sort_unstable();
        o.dedup();
        o
    };
    if !orphans.is_empty() {
        return Err(Error::UnmatchableQuery(orphans));
    }

    let n_g = gallery_feats.len();
    let mut first_ranks = Vec::with_capacity(query_feats.len());
    let mut ap_sum = 0.0f64;
    for (qf, &qid) in query_feats.iter().zip(query_ids) {
        let mut order: Vec<usize> = (0..n_g).collect();
        let sims: Vec<f64> = gallery_feats.iter().map(|g| qf.dot(g).as_f64()).collect();
        // Stable sort keeps the gallery-index tie-break.
        order.sort_by(|&a, &b| sims[b].partial_cmp(&sims[a]).unwrap());
        let mut hits = 0usize;
        let mut precision_sum = 0.0f64;
        let mut first = 0usize;
        for (pos, &g) in order.iter().enumerate() {
            if gallery_ids[g] == qid {
                hits += 1;
                precision_sum += hits as f64 / (pos + 1) as f64;
                if first == 0 {
                    first = pos + 1;
                }
            }
        }
        ap_sum += precision_sum / hits as f64;
        first_ranks.push(first);
    }

    let n_q = first_ranks.len() as f64;
    let rank_k = CMC_RANKS
        .iter()
        .map(|&k| {
            let kk = k.min(n_g);
            let acc = first_ranks.iter().filter(|&&r| r <= kk).count() as f64 / n_q;
            (k, acc)
        })
        .collect();
    Ok(RetrievalResult {
        direction,
        rank_k,
        map_score: ap_sum / n_q,
        per_query_ranks: first_ranks,
    })
}

/// Cluster quality against generator ground truth.
#[derive(Debug, Clone, Serialize)]
pub struct ClusterDiagnostics {
    pub k_vis: usize,
    pub k_ir: usize,
    /// K_vis / K_ir.
    pub granularity_ratio: f64,
    pub ari_vis: f64,
    pub ari_ir: f64,
    pub noise_vis: usize,
    pub noise_ir: usize,
}

/// Adjusted Rand index between a pseudo-labeling (noise points each counted
/// as their own singleton cluster) and the true identities.
pub fn adjusted_rand_index(labels: &[i64], true_ids: &[u32]) -> f64 {
    assert_eq!(labels.len(), true_ids.len());
    let n = labels.len();
    if n < 2 {
        return 1.0;
    }
    // Remap noise points to unique cluster ids.
    let base = labels.iter().copied().max().unwrap_or(0) + 1;
    let eff: Vec<i64> = labels
        .iter()
        .enumerate()
        .map(|(i, &l)| if l == NOISE { base + i as i64 } else { l })
        .collect();

    let choose2 = |x: usize| (x * x.saturating_sub(1)) as f64 / 2.0;
    let mut table = std::collections::HashMap::<(i64, u32), usize>::new();
    let mut rows = std::collections::HashMap::<i64, usize>::new();
    let mut cols = std::collections::HashMap::<u32, usize>::new();
    for (&l, &t) in eff.iter().zip(true_ids) {
        *table.entry((l, t)).or_default() += 1;
        *rows.entry(l).or_default() += 1;
        *cols.entry(t).or_default() += 1;
    }
    let sum_ij: f64 = table.values().map(|&c| choose2(c)).sum();
    let sum_a: f64 = rows.values().map(|&c| choose2(c)).sum();
    let sum_b: f64 = cols.values().map(|&c| choose2(c)).sum();
    let total = choose2(n);
    let expected = sum_a * sum_b / total;
    let max_index = 0.5 * (sum_a + sum_b);
    if (max_index - expected).abs() < 1e-12 {
        return 1.0;
    }
    (sum_ij - expected) / (max_index - expected)
}

pub fn cluster_diagnostics(
    labels_vis: &PseudoLabels,
    true_ids_vis: &[u32],
    labels_ir: &PseudoLabels,
    true_ids_ir: &[u32],
) -> ClusterDiagnostics {
    let ratio = if labels_ir.k > 0 {
        labels_vis.k as f64 / labels_ir.k as f64
    } else {
        f64::NAN
    };
    ClusterDiagnostics {
        k_vis: labels_vis.k,
        k_ir: labels_ir.k,
        granularity_ratio: ratio,
        ari_vis: adjusted_rand_index(&labels_vis.labels, true_ids_vis),
        ari_ir: adjusted_rand_index(&labels_ir.labels, true_ids_ir),
        noise_vis: labels_vis.labels.iter().filter(|&&l| l == NOISE).count(),
        noise_ir: labels_ir.labels.iter().filter(|&&l| l == NOISE).count(),
    }
}
