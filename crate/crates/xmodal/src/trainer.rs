//! Three-stage training schedule over the linear encoder.
//!
//! Stage 1 warms the encoder up on counterfactual views (style transfer,
//! frame swaps, sequence consistency). Stage 2 adds intra-modality
//! clustering with prototype contrastive steps. Stage 3 adds cross-modality
//! refinement on top. One Adam optimizer owns the parameters throughout;
//! the learning rate decays cosine over stage 1 and stays at the late value
//! afterwards.
//!
//! All randomness inside an epoch comes from a substream derived from
//! (seed, epoch), so resuming from a checkpoint reproduces the uninterrupted
//! run bitwise.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::ciw::{
    bidirectional_nce, ics_wrt_loss, make_mpb_view, make_ttb_view, InterventionConfig,
    MpbDirections,
};
use crate::cluster::{build_bank, dbscan, intra_loss, ClusterConfig, PrototypeBank, PseudoLabels};
use crate::encoder::{
    backprop, encode, save_params, CheckpointMeta, EncoderParams, ParamGrad, SeqFeature,
};
use crate::error::{Error, Result};
use crate::math::FeatureVec;
use crate::pgur::{pgur_loss, progressive_match, reconstruct, AssociationDump, RefinedBanks};
use crate::rng::DetRng;
use crate::synthgen::{Modality, Tracklet};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub stage3_epochs: usize,
    pub lr_stage1: f64,
    /// Learning rate for stages 2-3 and the stage-1 cosine floor.
    pub lr_late: f64,
    /// Total batch size, split evenly across modalities.
    pub batch: usize,
    pub seq_len: usize,
    pub tau: f64,
    /// Weight of the frame-swap contrastive term.
    pub lambda1: f64,
    /// Weight of the sequence-consistency term.
    pub lambda2: f64,
    /// Weight of the ambiguous infrared loss.
    pub lambda3: f64,
    /// Weight of the ambiguous visible loss.
    pub lambda4: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub dim: usize,
    pub seed: u64,
    /// Keep the warm-up losses active during stage 3.
    pub stage3_keep_ciw: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            stage1_epochs: 40,
            stage2_epochs: 30,
            stage3_epochs: 50,
            lr_stage1: 4e-5,
            lr_late: 4e-7,
            batch: 32,
            seq_len: 6,
            tau: 0.05,
            lambda1: 2.6,
            lambda2: 0.1,
            lambda3: 1.9,
            lambda4: 1.5,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            dim: 32,
            seed: 1234,
            stage3_keep_ciw: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr_stage1 <= 0.0 || self.lr_late <= 0.0 {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.batch < 4 || !self.batch.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "batch must be even and >= 4, got {}",
                self.batch
            )));
        }
        if self.tau <= 0.0 {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if [self.lambda1, self.lambda2, self.lambda3, self.lambda4]
            .iter()
            .any(|&l| l < 0.0)
        {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if self.seq_len < 2 {
            return Err(Error::Config("seq_len must be >= 2".into()));
        }
        if self.dim == 0 {
            return Err(Error::Config("feature dim must be positive".into()));
        }
        Ok(())
    }

    pub fn total_epochs(&self) -> usize {
        self.stage1_epochs + self.stage2_epochs + self.stage3_epochs
    }

    pub fn stage_of(&self, epoch: usize) -> u32 {
        if epoch < self.stage1_epochs {
            1
        } else if epoch < self.stage1_epochs + self.stage2_epochs {
            2
        } else {
            3
        }
    }

    /// Cosine decay from lr_stage1 to lr_late across stage 1; lr_late after.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if self.stage_of(epoch) != 1 {
            return self.lr_late;
        }
        let span = self.stage1_epochs.max(1) as f64;
        let phase = std::f64::consts::PI * epoch as f64 / span;
        self.lr_late + 0.5 * (self.lr_stage1 - self.lr_late) * (1.0 + phase.cos())
    }
}

/// Pipeline pieces switched off for ablation runs.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablation {
    pub disable_mpb: bool,
    pub disable_ttb: bool,
    pub disable_ics: bool,
    pub disable_pgur: bool,
    pub disable_ambiguous: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamState {
    pub t: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn zeros(n: usize) -> Self {
        AdamState {
            t: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }
}

/// One line of the metrics stream.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub stage: u32,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_mpb: f64,
    pub loss_ttb: f64,
    pub loss_seq: f64,
    pub loss_ciw: f64,
    pub loss_intra: f64,
    pub loss_pgur: f64,
    pub k_vis: usize,
    pub k_ir: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub association: Option<AssociationDump>,
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub params: EncoderParams<f64>,
    pub adam: AdamState,
    /// Next epoch to run (global, across stages).
    pub epoch: usize,
    pub history: Vec<EpochMetrics>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    epoch: usize,
    stage: u32,
    seed: u64,
    history: Vec<EpochMetrics>,
}

pub struct Trainer<'a> {
    pub config: &'a TrainConfig,
    pub intervention: &'a InterventionConfig,
    pub clustering: &'a ClusterConfig,
    pub ablation: Ablation,
    pub data: &'a [Tracklet],
    /// Checkpoints and metrics land here when set.
    pub out_dir: Option<PathBuf>,
}

/// Per-epoch loss accumulators, averaged over batches at flush.
#[derive(Debug, Clone, Copy, Default)]
struct LossParts {
    mpb: f64,
    ttb: f64,
    seq: f64,
    intra: f64,
    pgur: f64,
}

impl LossParts {
    fn ciw(&self, cfg: &TrainConfig) -> f64 {
        self.mpb + cfg.lambda1 * self.ttb + cfg.lambda2 * self.seq
    }

    fn total(&self, cfg: &TrainConfig) -> f64 {
        self.intra + self.ciw(cfg) + self.pgur
    }

    fn add(&mut self, o: &LossParts) {
        self.mpb += o.mpb;
        self.ttb += o.ttb;
        self.seq += o.seq;
        self.intra += o.intra;
        self.pgur += o.pgur;
    }

    fn scale(&mut self, s: f64) {
        self.mpb *= s;
        self.ttb *= s;
        self.seq *= s;
        self.intra *= s;
        self.pgur *= s;
    }
}

/// Epoch-level clustering context shared by stages 2-3.
struct ClusterContext {
    labels_vis: PseudoLabels,
    labels_ir: PseudoLabels,
    bank_vis: Option<PrototypeBank<f64>>,
    bank_ir: Option<PrototypeBank<f64>>,
    /// Per-tracklet label in its modality's clustering.
    label_of: Vec<i64>,
}

impl<'a> Trainer<'a> {
    pub fn input_dim(&self) -> usize {
        self.data[0].dims.len()
    }

    pub fn init_state(&self) -> TrainState {
        let mut rng = DetRng::new(self.config.seed).substream(0x1217);
        let params = EncoderParams::random(self.config.dim, self.input_dim(), &mut rng);
        let n = params.n_params();
        TrainState {
            params,
            adam: AdamState::zeros(n),
            epoch: 0,
            history: Vec::new(),
        }
    }

    fn indices_of(&self, m: Modality) -> Vec<usize> {
        (0..self.data.len())
            .filter(|&i| self.data[i].modality == m)
            .collect()
    }

    /// Deterministic epoch batches: per-modality shuffles, equal halves.
    fn make_batches(&self, erng: &mut DetRng) -> Vec<Vec<usize>> {
        let mut vis = self.indices_of(Modality::Vis);
        let mut ir = self.indices_of(Modality::Ir);
        assert!(!vis.is_empty() && !ir.is_empty(), "both modalities required");
        erng.shuffle(&mut vis);
        erng.shuffle(&mut ir);
        let half = self.config.batch / 2;
        let n_batches = (vis.len().min(ir.len()) / half).max(1);
        (0..n_batches)
            .map(|b| {
                let take = |xs: &[usize]| -> Vec<usize> {
                    xs.iter()
                        .cycle()
                        .skip(b * half)
                        .take(half.min(xs.len()))
                        .copied()
                        .collect()
                };
                let mut batch = take(&vis);
                batch.extend(take(&ir));
                batch
            })
            .collect()
    }

    fn adam_step(&self, state: &mut TrainState, grad: &ParamGrad<f64>, lr: f64) {
        let cfg = self.config;
        state.adam.t += 1;
        let t = state.adam.t as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        let flat = grad.dw.iter().chain(grad.db.iter());
        let params = state.params.w.iter_mut().chain(state.params.b.iter_mut());
        for (((p, &g), m), v) in params
            .zip(flat)
            .zip(state.adam.m.iter_mut())
            .zip(state.adam.v.iter_mut())
        {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + cfg.adam_eps);
        }
    }

    /// Warm-up losses for one batch; returns parts and the parameter gradient.
    fn ciw_batch(
        &self,
        params: &EncoderParams<f64>,
        batch: &[usize],
        erng: &mut DetRng,
    ) -> Result<(LossParts, ParamGrad<f64>)> {
        let cfg = self.config;
        let icfg = self.intervention;
        let mut parts = LossParts::default();
        let mut grad = ParamGrad::zeros(params);

        let originals: Vec<&Tracklet> = batch.iter().map(|&i| &self.data[i]).collect();
        let orig_feats: Vec<SeqFeature<f64>> = originals
            .iter()
            .map(|t| encode(params, t))
            .collect::<Result<_>>()?;

        // Accumulated gradient on each original's sequence feature / frames.
        let dim = params.dim;
        let mut g_orig: Vec<FeatureVec<f64>> = vec![FeatureVec::zeros(dim); batch.len()];
        let mut g_frames: Option<Vec<Vec<FeatureVec<f64>>>> = None;

        let vis_pool: Vec<&Tracklet> = self
            .indices_of(Modality::Vis)
            .into_iter()
            .map(|i| &self.data[i])
            .collect();
        let ir_pool: Vec<&Tracklet> = self
            .indices_of(Modality::Ir)
            .into_iter()
            .map(|i| &self.data[i])
            .collect();

        // Style-transfer counterfactuals on the direction-eligible subset.
        if !self.ablation.disable_mpb {
            let eligible: Vec<usize> = (0..batch.len())
                .filter(|&p| match icfg.directions {
                    MpbDirections::Both => true,
                    // Visible style onto infrared tracklets.
                    MpbDirections::VisToIr => originals[p].modality == Modality::Ir,
                    MpbDirections::IrToVis => originals[p].modality == Modality::Vis,
                })
                .collect();
            if eligible.len() >= 2 {
                let mut views = Vec::with_capacity(eligible.len());
                for &p in &eligible {
                    let pool = match originals[p].modality {
                        Modality::Vis => &ir_pool,
                        Modality::Ir => &vis_pool,
                    };
                    views.push(make_mpb_view(originals[p], pool, icfg, erng)?);
                }
                let cf_feats: Vec<SeqFeature<f64>> = views
                    .iter()
                    .map(|v| encode(params, &v.intervened))
                    .collect::<Result<_>>()?;
                let o: Vec<FeatureVec<f64>> =
                    eligible.iter().map(|&p| orig_feats[p].f.clone()).collect();
                let c: Vec<FeatureVec<f64>> = cf_feats.iter().map(|s| s.f.clone()).collect();
                let nce = bidirectional_nce(&o, &c, cfg.tau)?;
                parts.mpb = nce.loss;
                for (e, &p) in eligible.iter().enumerate() {
                    g_orig[p].add_assign(&nce.grad_originals[e]);
                    grad.add(&backprop(
                        params,
                        &views[e].intervened,
                        &nce.grad_counterfactuals[e],
                        None,
                    )?);
                }
            }
        }

        // Frame-swap counterfactuals on the whole batch.
        if !self.ablation.disable_ttb && batch.len() >= 2 {
            let views: Vec<_> = originals
                .iter()
                .map(|t| make_ttb_view(t, icfg, erng))
                .collect::<Result<Vec<_>>>()?;
            let cf_feats: Vec<SeqFeature<f64>> = views
                .iter()
                .map(|v| encode(params, &v.intervened))
                .collect::<Result<_>>()?;
            let o: Vec<FeatureVec<f64>> = orig_feats.iter().map(|s| s.f.clone()).collect();
            let c: Vec<FeatureVec<f64>> = cf_feats.iter().map(|s| s.f.clone()).collect();
            let nce = bidirectional_nce(&o, &c, cfg.tau)?;
            parts.ttb = nce.loss;
            for (p, view) in views.iter().enumerate() {
                g_orig[p].add_scaled(&nce.grad_originals[p], cfg.lambda1);
                grad.add(&backprop(
                    params,
                    &view.intervened,
                    &nce.grad_counterfactuals[p].scaled(cfg.lambda1),
                    None,
                )?);
            }
        }

        // Sequence consistency over the originals' frame features.
        if !self.ablation.disable_ics && batch.len() >= 2 {
            let seqs: Vec<Vec<FeatureVec<f64>>> =
                orig_feats.iter().map(|s| s.frame_feats.clone()).collect();
            let anchors: Vec<usize> = originals.iter().map(|t| erng.below(t.seq_len)).collect();
            let ics = ics_wrt_loss(&seqs, &anchors)?;
            parts.seq = ics.loss;
            g_frames = Some(
                ics.grad_frames
                    .into_iter()
                    .map(|fs| fs.into_iter().map(|g| g.scaled(cfg.lambda2)).collect())
                    .collect(),
            );
        }

        for (p, t) in originals.iter().enumerate() {
            let frames = g_frames.as_ref().map(|gf| gf[p].as_slice());
            grad.add(&backprop(params, t, &g_orig[p], frames)?);
        }
        Ok((parts, grad))
    }

    /// Encodes the full training set and clusters each modality.
    fn cluster_epoch(&self, params: &EncoderParams<f64>) -> Result<ClusterContext> {
        let vis_idx = self.indices_of(Modality::Vis);
        let ir_idx = self.indices_of(Modality::Ir);
        let enc = |idx: &[usize]| -> Result<Vec<FeatureVec<f64>>> {
            idx.iter()
                .map(|&i| encode(params, &self.data[i]).map(|s| s.f))
                .collect()
        };
        let feats_vis = enc(&vis_idx)?;
        let feats_ir = enc(&ir_idx)?;
        let ccfg = self.clustering;
        let labels_vis = dbscan(&feats_vis, ccfg.eps, ccfg.min_pts)?;
        let labels_ir = dbscan(&feats_ir, ccfg.eps, ccfg.min_pts)?;

        let mk_bank = |feats: &[FeatureVec<f64>], labels: &PseudoLabels, m: Modality| {
            match build_bank(feats, labels, m, ccfg.momentum) {
                Ok(b) => Some(b),
                Err(Error::NoClusters) => {
                    log::warn!("{m:?}: all points are noise, no prototype bank this epoch");
                    None
                }
                Err(e) => panic!("bank construction failed: {e}"),
            }
        };
        let bank_vis = mk_bank(&feats_vis, &labels_vis, Modality::Vis);
        let bank_ir = mk_bank(&feats_ir, &labels_ir, Modality::Ir);

        let mut label_of = vec![crate::cluster::NOISE; self.data.len()];
        for (pos, &i) in vis_idx.iter().enumerate() {
            label_of[i] = labels_vis.labels[pos];
        }
        for (pos, &i) in ir_idx.iter().enumerate() {
            label_of[i] = labels_ir.labels[pos];
        }
        Ok(ClusterContext {
            labels_vis,
            labels_ir,
            bank_vis,
            bank_ir,
            label_of,
        })
    }

    /// Refreshes the infrared feature set and runs association + reconstruction.
    fn pgur_epoch(
        &self,
        params: &EncoderParams<f64>,
        ctx: &ClusterContext,
    ) -> Result<Option<(crate::pgur::AssociationReport, RefinedBanks<f64>)>> {
        let (Some(bank_vis), Some(bank_ir)) = (&ctx.bank_vis, &ctx.bank_ir) else {
            log::warn!("skipping cross-modality refinement: a modality has no clusters");
            return Ok(None);
        };
        let ir_idx = self.indices_of(Modality::Ir);
        let feats_ir: Vec<FeatureVec<f64>> = ir_idx
            .iter()
            .map(|&i| encode(params, &self.data[i]).map(|s| s.f))
            .collect::<Result<_>>()?;
        let report = progressive_match(bank_vis, bank_ir)?;
        let banks = reconstruct(&feats_ir, &ctx.labels_ir, bank_vis, bank_ir, &report)?;
        if banks.k() == 0 {
            log::warn!("skipping cross-modality refinement: refined banks are empty");
            return Ok(None);
        }
        Ok(Some((report, banks)))
    }

    /// One clustered batch step (stages 2-3). Returns loss parts and grad;
    /// applies bank momentum updates.
    #[allow(clippy::too_many_arguments)]
    fn clustered_batch(
        &self,
        params: &EncoderParams<f64>,
        batch: &[usize],
        ctx: &mut ClusterContext,
        refined: Option<&(crate::pgur::AssociationReport, RefinedBanks<f64>)>,
        with_ciw: bool,
        erng: &mut DetRng,
    ) -> Result<(LossParts, ParamGrad<f64>)> {
        let cfg = self.config;
        let mut parts = LossParts::default();
        let mut grad = ParamGrad::zeros(params);
        let dim = params.dim;

        let feats: Vec<SeqFeature<f64>> = batch
            .iter()
            .map(|&i| encode(params, &self.data[i]))
            .collect::<Result<_>>()?;
        let mut g_f: Vec<FeatureVec<f64>> = vec![FeatureVec::zeros(dim); batch.len()];

        // Per-modality batch views.
        let pos_of = |m: Modality| -> Vec<usize> {
            (0..batch.len())
                .filter(|&p| self.data[batch[p]].modality == m)
                .collect()
        };
        let vis_pos = pos_of(Modality::Vis);
        let ir_pos = pos_of(Modality::Ir);
        let gather = |pos: &[usize]| -> (Vec<FeatureVec<f64>>, Vec<i64>) {
            (
                pos.iter().map(|&p| feats[p].f.clone()).collect(),
                pos.iter().map(|&p| ctx.label_of[batch[p]]).collect(),
            )
        };
        let (vis_f, vis_l) = gather(&vis_pos);
        let (ir_f, ir_l) = gather(&ir_pos);

        // Intra-modality contrastive term, then bank refresh.
        let mut n_intra = 0usize;
        for (pos, f, l, bank) in [
            (&vis_pos, &vis_f, &vis_l, &mut ctx.bank_vis),
            (&ir_pos, &ir_f, &ir_l, &mut ctx.bank_ir),
        ] {
            let Some(bank) = bank.as_mut() else { continue };
            let out = intra_loss(f, l, bank, cfg.tau)?;
            parts.intra += out.loss;
            n_intra += 1;
            for (k, &p) in pos.iter().enumerate() {
                g_f[p].add_assign(&out.grad_features[k]);
            }
            for &(cluster, k) in &out.bank_updates {
                bank.momentum_update(cluster, &f[k])?;
            }
        }
        if n_intra > 0 {
            parts.intra /= n_intra as f64;
            let inv = 1.0 / n_intra as f64;
            for g in g_f.iter_mut() {
                for v in g.as_mut_slice() {
                    *v *= inv;
                }
            }
        }

        // Cross-modality refinement term.
        if let Some((report, banks)) = refined {
            let (l3, l4) = if self.ablation.disable_ambiguous {
                (0.0, 0.0)
            } else {
                (cfg.lambda3, cfg.lambda4)
            };
            let out = pgur_loss(&ir_f, &ir_l, &vis_f, &vis_l, banks, report, cfg.tau, l3, l4)?;
            parts.pgur = out.loss;
            for (k, &p) in ir_pos.iter().enumerate() {
                g_f[p].add_assign(&out.ir.grad_features[k]);
            }
            for (k, &p) in vis_pos.iter().enumerate() {
                g_f[p].add_assign(&out.vis.grad_features[k]);
            }
        }

        for (p, &i) in batch.iter().enumerate() {
            grad.add(&backprop(params, &self.data[i], &g_f[p], None)?);
        }

        if with_ciw {
            let (ciw_parts, ciw_grad) = self.ciw_batch(params, batch, erng)?;
            parts.add(&LossParts {
                intra: 0.0,
                pgur: 0.0,
                ..ciw_parts
            });
            grad.add(&ciw_grad);
        }
        Ok((parts, grad))
    }

    fn params_finite(state: &TrainState) -> bool {
        state
            .params
            .w
            .iter()
            .chain(&state.params.b)
            .all(|v| v.is_finite())
    }

    fn run_epoch(&self, state: &mut TrainState, epoch: usize) -> Result<EpochMetrics> {
        let cfg = self.config;
        if !Self::params_finite(state) {
            return Err(Error::NumericalDivergence { epoch });
        }
        let stage = cfg.stage_of(epoch);
        let lr = cfg.lr_at(epoch);
        let mut erng = DetRng::new(cfg.seed).substream(0xE70C + epoch as u64);
        let batches = self.make_batches(&mut erng);

        let mut parts = LossParts::default();
        let (mut k_vis, mut k_ir) = (0usize, 0usize);
        let mut association = None;

        let mut ctx = if stage >= 2 {
            let ctx = self.cluster_epoch(&state.params)?;
            k_vis = ctx.labels_vis.k;
            k_ir = ctx.labels_ir.k;
            Some(ctx)
        } else {
            None
        };
        let refined = if stage == 3 && !self.ablation.disable_pgur {
            let r = self.pgur_epoch(&state.params, ctx.as_ref().unwrap())?;
            if let Some((report, banks)) = &r {
                association = Some(AssociationDump::new(report, banks));
            }
            r
        } else {
            None
        };

        for batch in &batches {
            let (bp, grad) = match stage {
                1 => self.ciw_batch(&state.params, batch, &mut erng)?,
                _ => self.clustered_batch(
                    &state.params,
                    batch,
                    ctx.as_mut().unwrap(),
                    refined.as_ref(),
                    stage == 3 && cfg.stage3_keep_ciw,
                    &mut erng,
                )?,
            };
            if !bp.total(cfg).is_finite() {
                return Err(Error::NumericalDivergence { epoch });
            }
            parts.add(&bp);
            self.adam_step(state, &grad, lr);
            if !Self::params_finite(state) {
                return Err(Error::NumericalDivergence { epoch });
            }
        }
        parts.scale(1.0 / batches.len() as f64);

        Ok(EpochMetrics {
            epoch,
            stage,
            lr,
            loss_total: parts.total(cfg),
            loss_mpb: parts.mpb,
            loss_ttb: parts.ttb,
            loss_seq: parts.seq,
            loss_ciw: parts.ciw(cfg),
            loss_intra: parts.intra,
            loss_pgur: parts.pgur,
            k_vis,
            k_ir,
            association,
        })
    }

    /// Runs global epochs [state.epoch, stop), checkpointing after each.
    /// On divergence the parameters roll back to the last finished epoch and
    /// that state is what lands on disk.
    pub fn run_until(&self, state: &mut TrainState, stop: usize) -> Result<()> {
        self.config.validate()?;
        let stop = stop.min(self.config.total_epochs());
        while state.epoch < stop {
            let epoch = state.epoch;
            let snapshot = (state.params.clone(), state.adam.clone());
            match self.run_epoch(state, epoch) {
                Ok(metrics) => {
                    state.history.push(metrics);
                    state.epoch += 1;
                    self.write_artifacts(state)?;
                }
                Err(e @ Error::NumericalDivergence { .. }) => {
                    state.params = snapshot.0;
                    state.adam = snapshot.1;
                    self.write_artifacts(state)?;
                    return Err(e);
                }
                Err(e) => return Err(e),
            }
        }
        Ok(())
    }

    pub fn run(&self, state: &mut TrainState) -> Result<()> {
        self.run_until(state, self.config.total_epochs())
    }

    fn write_artifacts(&self, state: &TrainState) -> Result<()> {
        let Some(dir) = &self.out_dir else {
            return Ok(());
        };
        std::fs::create_dir_all(dir)?;
        let stage = self.config.stage_of(state.epoch.saturating_sub(1));
        let meta = CheckpointMeta {
            dim: state.params.dim,
            input_dim: state.params.input_dim,
            seed: self.config.seed,
            stage: stage.to_string(),
        };
        save_params(&state.params, &meta, &dir.join("encoder.bin"))?;
        std::fs::write(dir.join("optim.json"), serde_json::to_vec(&state.adam)?)?;
        let manifest = Manifest {
            epoch: state.epoch,
            stage,
            seed: self.config.seed,
            history: state.history.clone(),
        };
        std::fs::write(
            dir.join("manifest.json"),
            serde_json::to_vec_pretty(&manifest)?,
        )?;

        let mut metrics = std::fs::File::create(dir.join("metrics.jsonl"))?;
        for m in &state.history {
            serde_json::to_writer(&mut metrics, m)?;
            writeln!(metrics)?;
        }
        let dumps: Vec<&AssociationDump> =
            state.history.iter().filter_map(|m| m.association.as_ref()).collect();
        if !dumps.is_empty() {
            let mut assoc = std::fs::File::create(dir.join("associations.jsonl"))?;
            for d in dumps {
                serde_json::to_writer(&mut assoc, d)?;
                writeln!(assoc)?;
            }
        }
        Ok(())
    }

    /// Restores a run from a checkpoint directory.
    pub fn load_state(dir: &Path) -> Result<TrainState> {
        let manifest: Manifest =
            serde_json::from_slice(&std::fs::read(dir.join("manifest.json"))?)?;
        let (params, _meta) = crate::encoder::load_params(&dir.join("encoder.bin"))?;
        let adam: AdamState = serde_json::from_slice(&std::fs::read(dir.join("optim.json"))?)?;
        Ok(TrainState {
            params,
            adam,
            epoch: manifest.epoch,
            history: manifest.history,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::{generate, split, GenConfig};

    fn tiny_gen() -> GenConfig {
        GenConfig {
            n_ids: 8,
            tracklets_per_id_per_modality: 2,
            seq_len: 6,
            channels: 2,
            height: 8,
            width: 6,
            ..GenConfig::default()
        }
    }

    fn tiny_train() -> TrainConfig {
        TrainConfig {
            stage1_epochs: 1,
            stage2_epochs: 1,
            stage3_epochs: 1,
            lr_stage1: 1e-3,
            lr_late: 1e-4,
            batch: 8,
            dim: 12,
            ..TrainConfig::default()
        }
    }

    fn trainer_over<'a>(
        cfg: &'a TrainConfig,
        icfg: &'a InterventionConfig,
        ccfg: &'a ClusterConfig,
        data: &'a [Tracklet],
        out: Option<PathBuf>,
    ) -> Trainer<'a> {
        Trainer {
            config: cfg,
            intervention: icfg,
            clustering: ccfg,
            ablation: Ablation::default(),
            data,
            out_dir: out,
        }
    }

    fn train_data(gen: &GenConfig) -> Vec<Tracklet> {
        let ds = generate(gen).unwrap();
        let mut rng = DetRng::new(7).substream(0x51);
        split(&ds, 0.5, &mut rng).unwrap().train
    }

    #[test]
    fn zero_epochs_leaves_state_unchanged() {
        let data = train_data(&tiny_gen());
        let cfg = TrainConfig {
            stage1_epochs: 0,
            stage2_epochs: 0,
            stage3_epochs: 0,
            ..tiny_train()
        };
        let icfg = InterventionConfig::default();
        let ccfg = ClusterConfig::default();
        let t = trainer_over(&cfg, &icfg, &ccfg, &data, None);
        let mut state = t.init_state();
        let before = state.params.clone();
        t.run(&mut state).unwrap();
        assert_eq!(state.params.w, before.w);
        assert_eq!(state.epoch, 0);
        assert!(state.history.is_empty());
    }

    #[test]
    fn fixed_seed_reproducible_history() {
        let data = train_data(&tiny_gen());
        let cfg = TrainConfig {
            stage1_epochs: 2,
            stage2_epochs: 0,
            stage3_epochs: 0,
            ..tiny_train()
        };
        let icfg = InterventionConfig::default();
        let ccfg = ClusterConfig::default();
        let t = trainer_over(&cfg, &icfg, &ccfg, &data, None);
        let mut a = t.init_state();
        let mut b = t.init_state();
        t.run(&mut a).unwrap();
        t.run(&mut b).unwrap();
        assert_eq!(a.params.w, b.params.w);
        for (x, y) in a.history.iter().zip(&b.history) {
            assert_eq!(x.loss_total.to_bits(), y.loss_total.to_bits());
        }
    }

    #[test]
    fn warmup_loss_decreases() {
        let data = train_data(&tiny_gen());
        let cfg = TrainConfig {
            stage1_epochs: 10,
            stage2_epochs: 0,
            stage3_epochs: 0,
            lr_stage1: 5e-3,
            lr_late: 5e-4,
            ..tiny_train()
        };
        let icfg = InterventionConfig::default();
        let ccfg = ClusterConfig::default();
        let t = trainer_over(&cfg, &icfg, &ccfg, &data, None);
        let mut state = t.init_state();
        t.run(&mut state).unwrap();
        let first = state.history.first().unwrap().loss_ciw;
        let last = state.history.last().unwrap().loss_ciw;
        assert!(last < first, "warm-up loss {first} -> {last}");
    }

    #[test]
    fn objective_accounting_holds() {
        let data = train_data(&tiny_gen());
        let cfg = tiny_train();
        let icfg = InterventionConfig::default();
        let ccfg = ClusterConfig::default();
        let t = trainer_over(&cfg, &icfg, &ccfg, &data, None);
        let mut state = t.init_state();
        t.run(&mut state).unwrap();
        assert_eq!(state.history.len(), 3);
        for m in &state.history {
            let total = m.loss_intra + m.loss_ciw + m.loss_pgur;
            assert!((m.loss_total - total).abs() <= 1e-9);
            let ciw = m.loss_mpb + cfg.lambda1 * m.loss_ttb + cfg.lambda2 * m.loss_seq;
            assert!((m.loss_ciw - ciw).abs() <= 1e-9);
        }
    }

    #[test]
    fn checkpoint_resume_is_bitwise() {
        let data = train_data(&tiny_gen());
        let cfg = TrainConfig {
            stage1_epochs: 1,
            stage2_epochs: 1,
            stage3_epochs: 2,
            ..tiny_train()
        };
        let icfg = InterventionConfig::default();
        let ccfg = ClusterConfig::default();
        let dir = tempfile::tempdir().unwrap();

        let t = trainer_over(&cfg, &icfg, &ccfg, &data, Some(dir.path().to_path_buf()));
        let mut full = t.init_state();
        t.run_until(&mut full, 2).unwrap();
        let mut resumed = Trainer::load_state(dir.path()).unwrap();
        assert_eq!(resumed.epoch, 2);
        assert_eq!(resumed.params.w, full.params.w, "loaded params drifted");
        assert_eq!(resumed.adam.m, full.adam.m, "loaded moments drifted");
        assert_eq!(resumed.adam.t, full.adam.t, "loaded step count drifted");
        t.run(&mut resumed).unwrap();

        let mut straight = t.init_state();
        t.run(&mut straight).unwrap();
        assert_eq!(resumed.params.w, straight.params.w);
        assert_eq!(resumed.params.b, straight.params.b);
        assert_eq!(resumed.adam.m, straight.adam.m);
    }

    #[test]
    fn nan_parameters_trigger_divergence_error() {
        let data = train_data(&tiny_gen());
        let cfg = tiny_train();
        let icfg = InterventionConfig::default();
        let ccfg = ClusterConfig::default();
        let t = trainer_over(&cfg, &icfg, &ccfg, &data, None);
        let mut state = t.init_state();
        state.params.w[0] = f64::NAN;
        match t.run(&mut state) {
            Err(Error::NumericalDivergence { epoch: 0 }) => {}
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn no_pgur_ablation_emits_no_association() {
        let data = train_data(&tiny_gen());
        let cfg = tiny_train();
        let icfg = InterventionConfig::default();
        let ccfg = ClusterConfig::default();
        let mut t = trainer_over(&cfg, &icfg, &ccfg, &data, None);
        t.ablation.disable_pgur = true;
        let mut state = t.init_state();
        t.run(&mut state).unwrap();
        assert!(state.history.iter().all(|m| m.association.is_none()));
        assert!(state.history.iter().all(|m| m.loss_pgur == 0.0));
    }

    #[test]
    fn stage_gating_of_loss_terms() {
        let data = train_data(&tiny_gen());
        let cfg = tiny_train();
        let icfg = InterventionConfig::default();
        let ccfg = ClusterConfig::default();
        let t = trainer_over(&cfg, &icfg, &ccfg, &data, None);
        let mut state = t.init_state();
        t.run(&mut state).unwrap();
        let m = &state.history;
        assert_eq!((m[0].stage, m[1].stage, m[2].stage), (1, 2, 3));
        assert_eq!(m[0].loss_intra, 0.0);
        assert_eq!(m[1].loss_ciw, 0.0);
        assert!(m[1].loss_intra != 0.0 || m[1].k_vis <= 1);
        // Stage 3 keeps the warm-up terms by default.
        assert!(m[2].loss_ciw != 0.0);
    }

    #[test]
    fn cosine_schedule_endpoints() {
        let cfg = TrainConfig {
            stage1_epochs: 10,
            ..TrainConfig::default()
        };
        assert!((cfg.lr_at(0) - cfg.lr_stage1).abs() < 1e-12);
        assert!(cfg.lr_at(5) < cfg.lr_at(0));
        assert!(cfg.lr_at(9) > cfg.lr_late);
        assert_eq!(cfg.lr_at(10), cfg.lr_late);
        assert_eq!(cfg.lr_at(75), cfg.lr_late);
    }

    #[test]
    fn invalid_config_rejected() {
        let bad = TrainConfig {
            batch: 5,
            ..TrainConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let bad = TrainConfig {
            lr_stage1: 0.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
