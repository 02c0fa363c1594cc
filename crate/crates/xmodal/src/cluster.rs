//! Intra-modality structure discovery: DBSCAN pseudo-labels on cosine
//! distance, per-cluster prototype banks with momentum updates, and the
//! prototype contrastive loss.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{cosine_sim, FeatureVec};
use crate::scalar::Scalar;
use crate::synthgen::Modality;

pub const NOISE: i64 = -1;

/// Cluster assignments aligned with a feature set; -1 marks noise.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PseudoLabels {
    pub labels: Vec<i64>,
    pub k: usize,
}

impl PseudoLabels {
    pub fn cluster_members(&self, c: i64) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == c)
            .map(|(i, _)| i)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClusterConfig {
    pub eps: f64,
    pub min_pts: usize,
    pub momentum: f64,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        ClusterConfig {
            eps: 0.35,
            min_pts: 2,
            momentum: 0.2,
        }
    }
}

/// DBSCAN on cosine distance (1 - cos). Core points have >= min_pts
/// neighbors within eps (the point itself counts); border points join the
/// first core cluster that discovers them; the rest are noise. Deterministic
/// given input order.
pub fn dbscan<S: Scalar>(features: &[FeatureVec<S>], eps: f64, min_pts: usize) -> Result<PseudoLabels> {
    assert!(eps > 0.0 && min_pts >= 1);
    let n = features.len();
    let mut dist = vec![0.0f64; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let d = 1.0 - cosine_sim(&features[i], &features[j])?.as_f64();
            dist[i * n + j] = d;
            dist[j * n + i] = d;
        }
    }
    let neighbors = |p: usize| -> Vec<usize> {
        (0..n).filter(|&q| dist[p * n + q] <= eps).collect()
    };

    const UNVISITED: i64 = -2;
    let mut labels = vec![UNVISITED; n];
    let mut k: i64 = 0;
    for p in 0..n {
        if labels[p] != UNVISITED {
            continue;
        }
        let nb = neighbors(p);
        if nb.len() < min_pts {
            labels[p] = NOISE;
            continue;
        }
        let cluster = k;
        k += 1;
        labels[p] = cluster;
        // Seed-set expansion in index order.
        let mut queue: std::collections::VecDeque<usize> = nb.into_iter().collect();
        while let Some(q) = queue.pop_front() {
            if labels[q] == NOISE {
                labels[q] = cluster; // border point
            }
            if labels[q] != UNVISITED {
                continue;
            }
            labels[q] = cluster;
            let qn = neighbors(q);
            if qn.len() >= min_pts {
                queue.extend(qn);
            }
        }
    }
    Ok(PseudoLabels {
        labels,
        k: k as usize,
    })
}

/// Per-modality prototype memory.
#[derive(Debug, Clone)]
pub struct PrototypeBank<S: Scalar> {
    pub prototypes: Vec<FeatureVec<S>>,
    pub modality: Modality,
    pub momentum: S,
}

impl<S: Scalar> PrototypeBank<S> {
    pub fn k(&self) -> usize {
        self.prototypes.len()
    }

    /// m_c <- normalize(momentum * m_c + (1 - momentum) * f).
    pub fn momentum_update(&mut self, label: usize, feature: &FeatureVec<S>) -> Result<()> {
        if label >= self.k() {
            return Err(Error::LabelMismatch {
                label: label as i64,
                bank: self.k(),
            });
        }
        let m = self.momentum;
        let mut blended = self.prototypes[label].scaled(m);
        blended.add_scaled(feature, S::one() - m);
        self.prototypes[label] = blended.normalized()?;
        Ok(())
    }
}

/// Cluster centroids, normalized; noise points excluded.
pub fn build_bank<S: Scalar>(
    features: &[FeatureVec<S>],
    labels: &PseudoLabels,
    modality: Modality,
    momentum: f64,
) -> Result<PrototypeBank<S>> {
    if labels.k == 0 {
        return Err(Error::NoClusters);
    }
    assert_eq!(features.len(), labels.labels.len());
    let mut prototypes = Vec::with_capacity(labels.k);
    for c in 0..labels.k as i64 {
        let members = labels.cluster_members(c);
        debug_assert!(!members.is_empty(), "empty cluster violates label invariant");
        let refs: Vec<&FeatureVec<S>> = members.iter().map(|&i| &features[i]).collect();
        prototypes.push(crate::math::mean_vec(&refs).normalized()?);
    }
    Ok(PrototypeBank {
        prototypes,
        modality,
        momentum: S::of(momentum),
    })
}

/// Result of the prototype contrastive loss over one batch: value, feature
/// gradients, and the bank updates to apply after the step.
#[derive(Debug, Clone)]
pub struct IntraLossOutput<S: Scalar> {
    pub loss: S,
    pub grad_features: Vec<FeatureVec<S>>,
    /// (cluster, feature index) pairs in application order.
    pub bank_updates: Vec<(usize, usize)>,
    /// Samples skipped because they carry the noise label.
    pub skipped: usize,
}

/// Softmax contrastive loss of each sample against all K prototypes at its
/// positive index, averaged over non-noise samples. Prototypes are
/// non-parametric: gradients flow to features only.
pub fn intra_loss<S: Scalar>(
    batch_features: &[FeatureVec<S>],
    batch_labels: &[i64],
    bank: &PrototypeBank<S>,
    tau: S,
) -> Result<IntraLossOutput<S>> {
    assert_eq!(batch_features.len(), batch_labels.len());
    if tau <= S::zero() {
        return Err(Error::BadTemperature(tau.as_f64()));
    }
    let k = bank.k();
    let dim = bank.prototypes[0].dim();
    let mut grad = vec![FeatureVec::zeros(dim); batch_features.len()];
    let mut loss = S::zero();
    let mut bank_updates = Vec::new();
    let mut active = 0usize;
    let mut skipped = 0usize;

    for (i, (f, &label)) in batch_features.iter().zip(batch_labels).enumerate() {
        if label == NOISE {
            skipped += 1;
            continue;
        }
        if label < 0 || label as usize >= k {
            return Err(Error::LabelMismatch {
                label,
                bank: k,
            });
        }
        let y = label as usize;
        active += 1;
        let logits: Vec<S> = bank.prototypes.iter().map(|m| f.dot(m)).collect();
        let probs = crate::math::softmax(&logits, tau)?;
        loss += -(probs[y].max(S::of(crate::math::LOG_EPS))).ln();
        for (c, m) in bank.prototypes.iter().enumerate() {
            let coeff = (probs[c] - if c == y { S::one() } else { S::zero() }) / tau;
            grad[i].add_scaled(m, coeff);
        }
        bank_updates.push((y, i));
    }
    if active > 0 {
        let inv = S::one() / S::of_usize(active);
        loss *= inv;
        for g in grad.iter_mut() {
            for v in g.as_mut_slice() {
                *v *= inv;
            }
        }
    }
    Ok(IntraLossOutput {
        loss,
        grad_features: grad,
        bank_updates,
        skipped,
    })
}
