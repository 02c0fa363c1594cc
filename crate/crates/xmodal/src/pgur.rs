//! Prototype-guided uncertainty refinement.
//!
//! Two rounds of minimum-cost bipartite matching associate visible cluster
//! prototypes with infrared ones; infrared clusters matched by exactly one
//! visible prototype are reliable, the rest are ambiguous and get split into
//! sub-clusters by nearest visible prototype. The refined banks pair one
//! visible prototype with one reconstructed infrared prototype, and the loss
//! applies hard supervision to reliable samples and soft, similarity-weighted
//! supervision to ambiguous ones.

use serde::{Deserialize, Serialize};

use crate::cluster::{PrototypeBank, PseudoLabels, NOISE};
use crate::error::{Error, Result};
use crate::math::FeatureVec;
use crate::scalar::Scalar;

/// One matching round: (vis index, ir index) pairs and the realized cost.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Assignment {
    pub pairs: Vec<(usize, usize)>,
    pub round: usize,
    pub cost: f64,
}

/// Exact rectangular minimum-cost assignment (shortest augmenting path with
/// potentials). Every row gets a distinct column; requires rows <= columns.
/// Column scans run in ascending index order, so equal-cost alternatives
/// resolve deterministically toward low indices.
fn min_cost_assignment<S: Scalar>(cost: &[Vec<S>]) -> Vec<usize> {
    let n_rows = cost.len();
    let n_cols = if n_rows == 0 { 0 } else { cost[0].len() };
    assert!(n_rows <= n_cols);
    let inf = S::infinity();
    let virt = n_cols; // virtual column that roots each augmenting path
    let mut u = vec![S::zero(); n_rows];
    let mut v = vec![S::zero(); n_cols + 1];
    let mut col_row: Vec<Option<usize>> = vec![None; n_cols + 1];
    let mut way = vec![0usize; n_cols + 1];

    for row in 0..n_rows {
        col_row[virt] = Some(row);
        let mut j0 = virt;
        let mut minv = vec![inf; n_cols + 1];
        let mut used = vec![false; n_cols + 1];
        loop {
            used[j0] = true;
            let i0 = col_row[j0].unwrap();
            let mut delta = inf;
            let mut j1 = virt;
            for j in 0..n_cols {
                if used[j] {
                    continue;
                }
                let cur = cost[i0][j] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n_cols {
                if used[j] {
                    if let Some(r) = col_row[j] {
                        u[r] += delta;
                    }
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if col_row[j0].is_none() {
                break;
            }
        }
        // Augment along the alternating path.
        while j0 != virt {
            let j1 = way[j0];
            col_row[j0] = col_row[j1];
            j0 = j1;
        }
    }

    let mut row_col = vec![usize::MAX; n_rows];
    for (j, r) in col_row.iter().enumerate().take(n_cols) {
        if let Some(r) = r {
            row_col[*r] = j;
        }
    }
    row_col
}

/// One matching round over the full vis x ir cost matrix, with some visible
/// rows excluded. Each infrared column is matched exactly once and each
/// available visible row at most once. When fewer visible rows are available
/// than infrared columns, all available rows are matched and the remaining
/// infrared clusters stay unmatched this round (logged).
pub fn match_round<S: Scalar>(
    cost: &[Vec<S>],
    excluded_vis: &[bool],
    round: usize,
) -> Assignment {
    let k_vis = cost.len();
    let k_ir = if k_vis == 0 { 0 } else { cost[0].len() };
    let available: Vec<usize> = (0..k_vis).filter(|&i| !excluded_vis[i]).collect();

    let mut pairs: Vec<(usize, usize)> = if available.len() >= k_ir {
        // Assign each ir column a distinct visible row: transpose so rows are
        // the smaller (ir) side.
        let t_cost: Vec<Vec<S>> = (0..k_ir)
            .map(|j| available.iter().map(|&i| cost[i][j]).collect())
            .collect();
        let ir_to_avail = min_cost_assignment(&t_cost);
        ir_to_avail
            .iter()
            .enumerate()
            .map(|(j, &a)| (available[a], j))
            .collect()
    } else {
        log::warn!(
            "round {round}: only {} visible prototypes available for {k_ir} infrared clusters",
            available.len()
        );
        let sub_cost: Vec<Vec<S>> = available.iter().map(|&i| cost[i].clone()).collect();
        let avail_to_ir = min_cost_assignment(&sub_cost);
        available
            .iter()
            .zip(&avail_to_ir)
            .map(|(&i, &j)| (i, j))
            .collect()
    };
    pairs.sort_unstable();
    let total: f64 = pairs.iter().map(|&(i, j)| cost[i][j].as_f64()).sum();
    Assignment {
        pairs,
        round,
        cost: total,
    }
}

/// Association outcome of progressive matching.
#[derive(Debug, Clone, Serialize)]
pub struct AssociationReport {
    pub rounds: Vec<Assignment>,
    /// ir cluster -> sorted candidate visible clusters (union over rounds).
    pub candidates: Vec<(usize, Vec<usize>)>,
    /// Reliable one-to-one pairs (ir cluster, vis cluster).
    pub reliable: Vec<(usize, usize)>,
    /// Ambiguous one-to-many groups (ir cluster, candidate vis clusters).
    pub ambiguous: Vec<(usize, Vec<usize>)>,
    pub unmatched_vis: Vec<usize>,
    pub k_vis: usize,
    pub k_ir: usize,
}

impl AssociationReport {
    pub fn candidate_set(&self, ir_cluster: usize) -> Option<&[usize]> {
        self.candidates
            .iter()
            .find(|(j, _)| *j == ir_cluster)
            .map(|(_, v)| v.as_slice())
    }
}

/// Round 1 over all visible prototypes, round 2 over those left unmatched.
pub fn progressive_match<S: Scalar>(
    bank_vis: &PrototypeBank<S>,
    bank_ir: &PrototypeBank<S>,
) -> Result<AssociationReport> {
    let k_vis = bank_vis.k();
    let k_ir = bank_ir.k();
    assert!(k_vis > 0 && k_ir > 0);
    let mut cost = vec![vec![S::zero(); k_ir]; k_vis];
    for (i, mv) in bank_vis.prototypes.iter().enumerate() {
        for (j, mi) in bank_ir.prototypes.iter().enumerate() {
            cost[i][j] = S::one() - crate::math::cosine_sim(mv, mi)?;
        }
    }

    let mut excluded = vec![false; k_vis];
    let round1 = match_round(&cost, &excluded, 1);
    for &(i, _) in &round1.pairs {
        excluded[i] = true;
    }
    let mut rounds = vec![round1];
    if excluded.iter().any(|&e| !e) {
        rounds.push(match_round(&cost, &excluded, 2));
    }

    let mut cand: Vec<Vec<usize>> = vec![Vec::new(); k_ir];
    for a in &rounds {
        for &(i, j) in &a.pairs {
            cand[j].push(i);
        }
    }
    for c in cand.iter_mut() {
        c.sort_unstable();
    }
    let mut matched_vis = vec![false; k_vis];
    for c in &cand {
        for &i in c {
            matched_vis[i] = true;
        }
    }

    let mut reliable = Vec::new();
    let mut ambiguous = Vec::new();
    for (j, c) in cand.iter().enumerate() {
        match c.len() {
            0 => log::warn!("infrared cluster {j} unmatched in both rounds"),
            1 => reliable.push((j, c[0])),
            _ => ambiguous.push((j, c.clone())),
        }
    }
    Ok(AssociationReport {
        candidates: cand.into_iter().enumerate().collect(),
        rounds,
        reliable,
        ambiguous,
        unmatched_vis: (0..k_vis).filter(|&i| !matched_vis[i]).collect(),
        k_vis,
        k_ir,
    })
}

/// Where a refined prototype pair came from.
#[derive(Debug, Clone, Serialize)]
pub struct RefinedOrigin {
    pub vis_cluster: usize,
    pub ir_cluster: usize,
    /// Infrared feature indices aggregated into the refined ir prototype
    /// (cluster members for reliable pairs, sub-cluster members for split
    /// ambiguous clusters).
    pub members: Vec<usize>,
    pub from_ambiguous: bool,
}

/// Index-aligned refined prototype pairs.
#[derive(Debug, Clone)]
pub struct RefinedBanks<S: Scalar> {
    pub vis: Vec<FeatureVec<S>>,
    pub ir: Vec<FeatureVec<S>>,
    pub origin: Vec<RefinedOrigin>,
    /// (vis cluster, ir cluster) candidate pairs dropped because no feature
    /// chose that visible prototype.
    pub dropped: Vec<(usize, usize)>,
}

impl<S: Scalar> RefinedBanks<S> {
    pub fn k(&self) -> usize {
        self.vis.len()
    }

    /// Refined index owning a given original visible cluster, if any.
    pub fn refined_of_vis(&self, vis_cluster: usize) -> Option<usize> {
        self.origin.iter().position(|o| o.vis_cluster == vis_cluster)
    }

    /// Refined indices fed by a given original ir cluster, ascending.
    pub fn refined_of_ir(&self, ir_cluster: usize) -> Vec<usize> {
        self.origin
            .iter()
            .enumerate()
            .filter(|(_, o)| o.ir_cluster == ir_cluster)
            .map(|(r, _)| r)
            .collect()
    }
}

/// Builds the refined paired banks: reliable pairs are copied through;
/// each ambiguous infrared cluster is split by reassigning its features to
/// the most similar candidate visible prototype and averaging the resulting
/// sub-clusters.
pub fn reconstruct<S: Scalar>(
    features_ir: &[FeatureVec<S>],
    labels_ir: &PseudoLabels,
    bank_vis: &PrototypeBank<S>,
    bank_ir: &PrototypeBank<S>,
    report: &AssociationReport,
) -> Result<RefinedBanks<S>> {
    let mut vis = Vec::new();
    let mut ir = Vec::new();
    let mut origin = Vec::new();
    let mut dropped = Vec::new();

    for &(j, i) in &report.reliable {
        vis.push(bank_vis.prototypes[i].clone());
        ir.push(bank_ir.prototypes[j].clone());
        origin.push(RefinedOrigin {
            vis_cluster: i,
            ir_cluster: j,
            members: labels_ir.cluster_members(j as i64),
            from_ambiguous: false,
        });
    }

    for (j, cands) in &report.ambiguous {
        let members = labels_ir.cluster_members(*j as i64);
        // Reassign each member to its most similar candidate prototype;
        // ties resolve to the lowest candidate index.
        let mut sub: Vec<Vec<usize>> = vec![Vec::new(); cands.len()];
        for &n in &members {
            let mut best = (S::neg_infinity(), 0usize);
            for (ci, &i) in cands.iter().enumerate() {
                let s = crate::math::cosine_sim(&features_ir[n], &bank_vis.prototypes[i])?;
                if s > best.0 {
                    best = (s, ci);
                }
            }
            sub[best.1].push(n);
        }
        for (ci, &i) in cands.iter().enumerate() {
            if sub[ci].is_empty() {
                log::warn!(
                    "dropping refined pair (vis {i}, ir {j}): no features chose this prototype"
                );
                dropped.push((i, *j));
                continue;
            }
            let refs: Vec<&FeatureVec<S>> = sub[ci].iter().map(|&n| &features_ir[n]).collect();
            vis.push(bank_vis.prototypes[i].clone());
            ir.push(crate::math::mean_vec(&refs).normalized()?);
            origin.push(RefinedOrigin {
                vis_cluster: i,
                ir_cluster: *j,
                members: sub[ci].clone(),
                from_ambiguous: true,
            });
        }
    }
    Ok(RefinedBanks {
        vis,
        ir,
        origin,
        dropped,
    })
}

/// Soft target distributions of one feature over a candidate set, against the
/// refined visible and infrared banks. Unit temperature.
pub fn soft_targets<S: Scalar>(
    feature: &FeatureVec<S>,
    candidate_refined: &[usize],
    banks: &RefinedBanks<S>,
) -> Result<(Vec<S>, Vec<S>)> {
    if candidate_refined.len() < 2 {
        return Err(Error::NotAmbiguous(candidate_refined.len()));
    }
    let to_vis: Vec<S> = candidate_refined
        .iter()
        .map(|&r| feature.dot(&banks.vis[r]))
        .collect();
    let to_ir: Vec<S> = candidate_refined
        .iter()
        .map(|&r| feature.dot(&banks.ir[r]))
        .collect();
    Ok((
        crate::math::softmax(&to_vis, S::one())?,
        crate::math::softmax(&to_ir, S::one())?,
    ))
}

/// How a batch sample relates to the refined banks.
#[derive(Debug, Clone, PartialEq)]
enum SampleRole {
    Reliable(usize),
    Ambiguous(Vec<usize>),
    Skip,
}

/// Loss and per-feature gradients for one modality's anchors.
#[derive(Debug, Clone)]
pub struct PgurModalityOutput<S: Scalar> {
    pub loss: S,
    pub hard_loss: S,
    pub soft_loss: S,
    pub grad_features: Vec<FeatureVec<S>>,
    pub skipped: usize,
}

#[derive(Debug, Clone)]
pub struct PgurLossOutput<S: Scalar> {
    pub loss: S,
    pub ir: PgurModalityOutput<S>,
    pub vis: PgurModalityOutput<S>,
}

fn role_of_ir<S: Scalar>(
    label: i64,
    report: &AssociationReport,
    banks: &RefinedBanks<S>,
) -> SampleRole {
    if label == NOISE {
        return SampleRole::Skip;
    }
    let j = label as usize;
    if let Some((_, i)) = report.reliable.iter().find(|&&(rj, _)| rj == j) {
        match banks.refined_of_vis(*i) {
            Some(r) => return SampleRole::Reliable(r),
            None => return SampleRole::Skip,
        }
    }
    if report.ambiguous.iter().any(|(aj, _)| *aj == j) {
        let refined = banks.refined_of_ir(j);
        return match refined.len() {
            0 => SampleRole::Skip,
            // A candidate set collapsed by dropped pairs is reliable.
            1 => SampleRole::Reliable(refined[0]),
            _ => SampleRole::Ambiguous(refined),
        };
    }
    SampleRole::Skip
}

fn role_of_vis<S: Scalar>(label: i64, banks: &RefinedBanks<S>) -> SampleRole {
    if label == NOISE {
        return SampleRole::Skip;
    }
    let i = label as usize;
    let Some(r) = banks.refined_of_vis(i) else {
        return SampleRole::Skip; // unmatched or dropped: intra-modality only
    };
    // A visible anchor is ambiguous iff its cluster sits inside an ambiguous
    // group; its candidate set is that group's surviving refined pairs.
    if banks.origin[r].from_ambiguous {
        let group = banks.refined_of_ir(banks.origin[r].ir_cluster);
        if group.len() > 1 {
            return SampleRole::Ambiguous(group);
        }
    }
    SampleRole::Reliable(r)
}

/// -log softmax at `target` over all refined prototypes (temperature tau),
/// for one bank; accumulates the feature gradient.
fn hard_term<S: Scalar>(
    f: &FeatureVec<S>,
    bank: &[FeatureVec<S>],
    target: usize,
    tau: S,
    weight: S,
    grad: &mut FeatureVec<S>,
) -> Result<S> {
    let logits: Vec<S> = bank.iter().map(|m| f.dot(m)).collect();
    let probs = crate::math::softmax(&logits, tau)?;
    for (k, m) in bank.iter().enumerate() {
        let coeff = weight * (probs[k] - if k == target { S::one() } else { S::zero() }) / tau;
        grad.add_scaled(m, coeff);
    }
    Ok(-weight * probs[target].max(S::of(crate::math::LOG_EPS)).ln())
}

/// sum_i -s_i log p_i over the candidate set for one bank, with the gradient
/// flowing through both the soft targets s and the predictions p.
fn soft_term<S: Scalar>(
    f: &FeatureVec<S>,
    bank: &[FeatureVec<S>],
    candidates: &[usize],
    tau: S,
    weight: S,
    grad: &mut FeatureVec<S>,
) -> Result<S> {
    let dim = f.dim();
    let s_logits: Vec<S> = candidates.iter().map(|&r| f.dot(&bank[r])).collect();
    let s = crate::math::softmax(&s_logits, S::one())?;
    let p_logits: Vec<S> = bank.iter().map(|m| f.dot(m)).collect();
    let p = crate::math::softmax(&p_logits, tau)?;

    let eps = S::of(crate::math::LOG_EPS);
    let log_p: Vec<S> = candidates.iter().map(|&r| p[r].max(eps).ln()).collect();
    let loss: S = s
        .iter()
        .zip(&log_p)
        .map(|(&si, &lp)| -si * lp)
        .sum();

    // Soft-target path: ds_i/df = s_i (m_i - sum_k s_k m_k).
    let mut s_mean = FeatureVec::zeros(dim);
    for (&r, &si) in candidates.iter().zip(&s) {
        s_mean.add_scaled(&bank[r], si);
    }
    for ((&r, &si), &lp) in candidates.iter().zip(&s).zip(&log_p) {
        let mut dir = bank[r].clone();
        dir.add_scaled(&s_mean, -S::one());
        grad.add_scaled(&dir, -weight * si * lp);
    }

    // Prediction path: dlog p_i/df = (m_i - sum_k p_k m_k) / tau.
    let mut p_mean = FeatureVec::zeros(dim);
    for (k, m) in bank.iter().enumerate() {
        p_mean.add_scaled(m, p[k]);
    }
    let mut s_dir = FeatureVec::zeros(dim);
    for (&r, &si) in candidates.iter().zip(&s) {
        s_dir.add_scaled(&bank[r], si);
    }
    s_dir.add_scaled(&p_mean, -S::one()); // sum_i s_i = 1
    grad.add_scaled(&s_dir, -weight / tau);

    Ok(weight * loss)
}

fn modality_loss<S: Scalar>(
    features: &[FeatureVec<S>],
    roles: &[SampleRole],
    bank_primary: &[FeatureVec<S>],
    bank_secondary: &[FeatureVec<S>],
    tau: S,
    lambda_soft: S,
) -> Result<PgurModalityOutput<S>> {
    let dim = if features.is_empty() { 0 } else { features[0].dim() };
    let mut grads = vec![FeatureVec::zeros(dim); features.len()];
    let n_rel = roles.iter().filter(|r| matches!(r, SampleRole::Reliable(_))).count();
    let n_amb = roles.iter().filter(|r| matches!(r, SampleRole::Ambiguous(_))).count();
    let w_rel = if n_rel > 0 {
        S::one() / S::of_usize(n_rel)
    } else {
        S::zero()
    };
    let w_amb = if n_amb > 0 {
        lambda_soft / S::of_usize(n_amb)
    } else {
        S::zero()
    };

    let mut hard = S::zero();
    let mut soft = S::zero();
    let mut skipped = 0usize;
    for ((f, role), grad) in features.iter().zip(roles).zip(grads.iter_mut()) {
        match role {
            SampleRole::Skip => skipped += 1,
            SampleRole::Reliable(r) => {
                hard += hard_term(f, bank_primary, *r, tau, w_rel, grad)?;
                hard += hard_term(f, bank_secondary, *r, tau, w_rel, grad)?;
            }
            SampleRole::Ambiguous(cands) => {
                if w_amb > S::zero() {
                    soft += soft_term(f, bank_primary, cands, tau, w_amb, grad)?;
                    soft += soft_term(f, bank_secondary, cands, tau, w_amb, grad)?;
                }
            }
        }
    }
    Ok(PgurModalityOutput {
        loss: hard + soft,
        hard_loss: hard,
        soft_loss: soft,
        grad_features: grads,
        skipped,
    })
}

/// Full refinement loss: infrared anchors against (refined vis, refined ir)
/// banks plus the symmetric visible term. Gradients flow to features only.
#[allow(clippy::too_many_arguments)]
pub fn pgur_loss<S: Scalar>(
    ir_features: &[FeatureVec<S>],
    ir_labels: &[i64],
    vis_features: &[FeatureVec<S>],
    vis_labels: &[i64],
    banks: &RefinedBanks<S>,
    report: &AssociationReport,
    tau: S,
    lambda_ir: S,
    lambda_vis: S,
) -> Result<PgurLossOutput<S>> {
    assert_eq!(ir_features.len(), ir_labels.len());
    assert_eq!(vis_features.len(), vis_labels.len());
    if tau <= S::zero() {
        return Err(Error::BadTemperature(tau.as_f64()));
    }
    if banks.k() == 0 {
        return Err(Error::NoClusters);
    }
    let ir_roles: Vec<SampleRole> = ir_labels
        .iter()
        .map(|&l| role_of_ir(l, report, banks))
        .collect();
    let vis_roles: Vec<SampleRole> = vis_labels
        .iter()
        .map(|&l| role_of_vis(l, banks))
        .collect();

    let ir = modality_loss(ir_features, &ir_roles, &banks.vis, &banks.ir, tau, lambda_ir)?;
    let vis = modality_loss(vis_features, &vis_roles, &banks.vis, &banks.ir, tau, lambda_vis)?;
    Ok(PgurLossOutput {
        loss: ir.loss + vis.loss,
        ir,
        vis,
    })
}

/// Per-epoch association summary written next to the metrics stream.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AssociationDump {
    pub k_vis: usize,
    pub k_ir: usize,
    pub k_refined: usize,
    pub n_reliable: usize,
    pub n_ambiguous: usize,
    pub n_dropped: usize,
    pub round_costs: Vec<f64>,
}

impl AssociationDump {
    pub fn new<S: Scalar>(report: &AssociationReport, banks: &RefinedBanks<S>) -> Self {
        AssociationDump {
            k_vis: report.k_vis,
            k_ir: report.k_ir,
            k_refined: banks.k(),
            n_reliable: report.reliable.len(),
            n_ambiguous: report.ambiguous.len(),
            n_dropped: banks.dropped.len(),
            round_costs: report.rounds.iter().map(|r| r.cost).collect(),
        }
    }
}
