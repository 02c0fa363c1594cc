//! Command-line driver: one JSON experiment config, four commands
//! (`generate`, `train`, `eval`, `ablate`), deterministic artifacts.
//!
//! Exit codes: 0 success, 2 config error, 3 I/O or corrupt artifact,
//! 4 numerical divergence.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::ciw::{InterventionConfig, MpbDirections};
use crate::cluster::{dbscan, ClusterConfig};
use crate::encoder::{encode, load_params, EncoderParams};
use crate::error::{Error, Result};
use crate::eval::{cluster_diagnostics, evaluate, ClusterDiagnostics, Direction, RetrievalResult};
use crate::math::FeatureVec;
use crate::rng::DetRng;
use crate::synthgen::{generate, save, split, Dataset, GenConfig, Modality, SplitSet, Tracklet};
use crate::trainer::{Ablation, TrainConfig, Trainer};

/// Relative output paths are resolved under this root when it is set.
pub const OUT_ROOT_ENV: &str = "XMODAL_OUT_ROOT";

/// The whole experiment in one JSON document. `generator` and `train` are
/// required sections; the rest default.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub generator: GenConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub intervention: InterventionConfig,
    #[serde(default)]
    pub clustering: ClusterConfig,
    #[serde(default)]
    pub ablation: Ablation,
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    #[serde(default = "default_split_seed")]
    pub split_seed: u64,
    #[serde(default)]
    pub out_dir: Option<String>,
}

fn default_train_fraction() -> f64 {
    0.5
}

fn default_split_seed() -> u64 {
    99
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.train.validate()?;
        self.intervention.validate(self.generator.seq_len)?;
        if self.train.seq_len != self.generator.seq_len {
            return Err(Error::Config(format!(
                "train.seq_len {} != generator.seq_len {}",
                self.train.seq_len, self.generator.seq_len
            )));
        }
        let c = &self.clustering;
        if c.eps <= 0.0 || c.min_pts < 1 || !(0.0..=1.0).contains(&c.momentum) {
            return Err(Error::Config("bad clustering parameters".into()));
        }
        if !(0.0..1.0).contains(&self.train_fraction) || self.train_fraction == 0.0 {
            return Err(Error::Config("train_fraction must be in (0, 1)".into()));
        }
        Ok(())
    }
}

/// Applies one `key=value` override onto the parsed JSON document. Dotted
/// keys reach into nested sections; the value is parsed as JSON, falling
/// back to a plain string.
fn apply_override(doc: &mut serde_json::Value, spec: &str) -> Result<()> {
    let spec = spec.trim_start_matches("--");
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override '{spec}' is not key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or(serde_json::Value::String(raw.to_string()));
    let mut node = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for part in &parts[..parts.len() - 1] {
        node = node
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("override path '{key}' crosses a non-object")))?
            .entry(part.to_string())
            .or_insert_with(|| serde_json::Value::Object(Default::default()));
    }
    node.as_object_mut()
        .ok_or_else(|| Error::Config(format!("override path '{key}' crosses a non-object")))?
        .insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

pub fn load_config(path: &Path, overrides: &[String]) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)?;
    let mut doc: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
    for ov in overrides {
        apply_override(&mut doc, ov)?;
    }
    let cfg: ExperimentConfig =
        serde_json::from_value(doc).map_err(|e| Error::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

/// CLI > config > default, then rooted under the env var if relative.
fn resolve_out(cli: Option<&Path>, cfg: &ExperimentConfig) -> PathBuf {
    let chosen = cli
        .map(Path::to_path_buf)
        .or_else(|| cfg.out_dir.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("xmodal-out"));
    match std::env::var_os(OUT_ROOT_ENV) {
        Some(root) if chosen.is_relative() => PathBuf::from(root).join(chosen),
        _ => chosen,
    }
}

#[derive(Parser)]
#[command(name = "xmodal", version, about = "Cross-modality tracklet retrieval experiments")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Debug, clap::Args)]
struct AblationFlags {
    /// Disable cross-modality style-transfer views.
    #[arg(long)]
    no_mpb: bool,
    /// Disable frame-swap views.
    #[arg(long)]
    no_ttb: bool,
    /// Disable the sequence-consistency loss.
    #[arg(long)]
    no_ics: bool,
    /// Disable stage-3 cross-modality refinement.
    #[arg(long)]
    no_pgur: bool,
    /// Disable the soft loss on ambiguous samples.
    #[arg(long)]
    no_ambiguous: bool,
    /// Restrict style transfer: both | vis2ir | ir2vis.
    #[arg(long)]
    mpb_direction: Option<String>,
}

impl AblationFlags {
    fn apply(&self, cfg: &mut ExperimentConfig) -> Result<()> {
        let a = &mut cfg.ablation;
        a.disable_mpb |= self.no_mpb;
        a.disable_ttb |= self.no_ttb;
        a.disable_ics |= self.no_ics;
        a.disable_pgur |= self.no_pgur;
        a.disable_ambiguous |= self.no_ambiguous;
        if let Some(d) = &self.mpb_direction {
            cfg.intervention.directions = match d.as_str() {
                "both" => MpbDirections::Both,
                "vis2ir" => MpbDirections::VisToIr,
                "ir2vis" => MpbDirections::IrToVis,
                other => {
                    return Err(Error::Config(format!(
                        "unknown mpb direction '{other}' (both | vis2ir | ir2vis)"
                    )))
                }
            };
        }
        Ok(())
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a synthetic dataset file.
    Generate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// key=value config overrides (dotted keys reach nested sections).
        #[arg(long = "set")]
        set: Vec<String>,
    },
    /// Run the training stages, writing checkpoints and metrics.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Reuse a generated dataset file instead of regenerating.
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long = "set")]
        set: Vec<String>,
        #[command(flatten)]
        ablation: AblationFlags,
    },
    /// Score a checkpoint on a dataset file, both retrieval directions.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Optional experiment config for clustering diagnostics parameters.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long = "set")]
        set: Vec<String>,
    },
    /// Run the ablation switch matrix and emit a comparison CSV.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long = "set")]
        set: Vec<String>,
    },
}

pub fn run() -> i32 {
    let _ = env_logger::try_init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // Help and version requests are successes, bad usage is a
            // config error.
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Generate { config, out, set } => {
            let cfg = load_config(&config, &set)?;
            let ds = generate(&cfg.generator)?;
            if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
                std::fs::create_dir_all(parent)?;
            }
            save(&ds, &out)?;
            println!("wrote {} tracklets to {}", ds.tracklets.len(), out.display());
            Ok(())
        }
        Cmd::Train {
            config,
            out,
            dataset,
            set,
            ablation,
        } => {
            let mut cfg = load_config(&config, &set)?;
            ablation.apply(&mut cfg)?;
            let out_dir = resolve_out(out.as_deref(), &cfg);
            let ds = match dataset {
                Some(p) => crate::synthgen::load(&p)?,
                None => generate(&cfg.generator)?,
            };
            cmd_train(&cfg, &ds, &out_dir)?;
            println!("training artifacts in {}", out_dir.display());
            Ok(())
        }
        Cmd::Eval {
            checkpoint,
            dataset,
            config,
            out,
            set,
        } => {
            let clustering = match config {
                Some(p) => load_config(&p, &set)?.clustering,
                None => ClusterConfig::default(),
            };
            let (params, _meta) = load_params(&checkpoint)?;
            let ds = crate::synthgen::load(&dataset)?;
            let report = cmd_eval(&params, &ds.tracklets, &clustering)?;
            let json = serde_json::to_string_pretty(&report)?;
            match out {
                Some(p) => {
                    if let Some(parent) = p.parent().filter(|x| !x.as_os_str().is_empty()) {
                        std::fs::create_dir_all(parent)?;
                    }
                    std::fs::write(&p, json)?;
                    println!("results in {}", p.display());
                }
                None => println!("{json}"),
            }
            Ok(())
        }
        Cmd::Ablate { config, out, set } => {
            let cfg = load_config(&config, &set)?;
            let out_dir = resolve_out(out.as_deref(), &cfg);
            cmd_ablate(&cfg, &out_dir)?;
            println!("ablation table in {}", out_dir.join("ablation.csv").display());
            Ok(())
        }
    }
}

fn split_config(cfg: &ExperimentConfig, ds: &Dataset) -> Result<SplitSet> {
    let mut rng = DetRng::new(cfg.split_seed);
    split(ds, cfg.train_fraction, &mut rng)
}

/// Trains (or resumes) in `out_dir` and writes the held-out tracklets next
/// to the checkpoints so `eval` can pick them up.
pub fn cmd_train(cfg: &ExperimentConfig, ds: &Dataset, out_dir: &Path) -> Result<()> {
    let sp = split_config(cfg, ds)?;
    std::fs::create_dir_all(out_dir)?;
    let mut test = sp.test_vis.clone();
    test.extend(sp.test_ir.iter().cloned());
    let test_ds = Dataset {
        tracklets: test,
        config: ds.config.clone(),
        merged_pairs: ds.merged_pairs.clone(),
    };
    save(&test_ds, &out_dir.join("test.xma"))?;

    let trainer = Trainer {
        config: &cfg.train,
        intervention: &cfg.intervention,
        clustering: &cfg.clustering,
        ablation: cfg.ablation,
        data: &sp.train,
        out_dir: Some(out_dir.to_path_buf()),
    };
    let mut state = if out_dir.join("manifest.json").exists() {
        Trainer::load_state(out_dir)?
    } else {
        trainer.init_state()
    };
    trainer.run(&mut state)
}

#[derive(Debug, Serialize)]
pub struct EvalReport {
    pub i2v: RetrievalResult,
    pub v2i: RetrievalResult,
    pub diagnostics: ClusterDiagnostics,
}

fn features_of(
    params: &EncoderParams<f64>,
    tracklets: &[&Tracklet],
) -> Result<(Vec<FeatureVec<f64>>, Vec<u32>)> {
    let mut feats = Vec::with_capacity(tracklets.len());
    let mut ids = Vec::with_capacity(tracklets.len());
    for t in tracklets {
        feats.push(encode(params, t)?.f);
        ids.push(t.true_id);
    }
    Ok((feats, ids))
}

/// Scores both retrieval directions over the given tracklets and reports
/// clustering diagnostics at the same operating point.
pub fn cmd_eval(
    params: &EncoderParams<f64>,
    tracklets: &[Tracklet],
    clustering: &ClusterConfig,
) -> Result<EvalReport> {
    let vis: Vec<&Tracklet> = tracklets.iter().filter(|t| t.modality == Modality::Vis).collect();
    let ir: Vec<&Tracklet> = tracklets.iter().filter(|t| t.modality == Modality::Ir).collect();
    let (vis_f, vis_ids) = features_of(params, &vis)?;
    let (ir_f, ir_ids) = features_of(params, &ir)?;
    let i2v = evaluate(&ir_f, &vis_f, &ir_ids, &vis_ids, Direction::I2V)?;
    let v2i = evaluate(&vis_f, &ir_f, &vis_ids, &ir_ids, Direction::V2I)?;
    let labels_vis = dbscan(&vis_f, clustering.eps, clustering.min_pts)?;
    let labels_ir = dbscan(&ir_f, clustering.eps, clustering.min_pts)?;
    let diagnostics = cluster_diagnostics(&labels_vis, &vis_ids, &labels_ir, &ir_ids);
    Ok(EvalReport {
        i2v,
        v2i,
        diagnostics,
    })
}

/// One named configuration of the switch matrix.
fn variants(cfg: &ExperimentConfig) -> Vec<(&'static str, ExperimentConfig)> {
    let mut base = cfg.clone();
    base.ablation = Ablation::default();
    base.intervention.directions = MpbDirections::Both;

    let mut b_only = base.clone();
    b_only.ablation.disable_mpb = true;
    b_only.ablation.disable_ttb = true;
    b_only.ablation.disable_ics = true;
    b_only.ablation.disable_pgur = true;
    // With every warm-up term off, stage 1 would be a no-op; skip it.
    b_only.train.stage1_epochs = 0;
    b_only.train.stage3_keep_ciw = false;
    // Stage 3 exists to apply the refinement loss; without it there is
    // nothing left for those epochs to add.
    b_only.train.stage3_epochs = 0;

    let mut b_ciw = base.clone();
    b_ciw.ablation.disable_pgur = true;
    b_ciw.train.stage3_epochs = 0;

    let mut vis2ir = base.clone();
    vis2ir.intervention.directions = MpbDirections::VisToIr;
    let mut ir2vis = base.clone();
    ir2vis.intervention.directions = MpbDirections::IrToVis;

    vec![
        ("B", b_only),
        ("B+CIW", b_ciw),
        ("B+CIW+PGUR", base),
        ("MPB-vis2ir", vis2ir),
        ("MPB-ir2vis", ir2vis),
    ]
}

/// Trains and scores every variant on the same data and split, one subdir
/// per variant, and writes `ablation.csv`.
pub fn cmd_ablate(cfg: &ExperimentConfig, out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    let ds = generate(&cfg.generator)?;
    let mut csv = String::from(
        "variant,rank1_i2v,rank5_i2v,rank10_i2v,map_i2v,rank1_v2i,map_v2i,k_vis,k_ir\n",
    );
    for (name, vcfg) in variants(cfg) {
        let vdir = out_dir.join(name);
        cmd_train(&vcfg, &ds, &vdir)?;
        let (params, _) = load_params(&vdir.join("encoder.bin"))?;
        let test = crate::synthgen::load(&vdir.join("test.xma"))?;
        let report = cmd_eval(&params, &test.tracklets, &vcfg.clustering)?;
        csv.push_str(&format!(
            "{name},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4},{},{}\n",
            report.i2v.rank(1),
            report.i2v.rank(5),
            report.i2v.rank(10),
            report.i2v.map_score,
            report.v2i.rank(1),
            report.v2i.map_score,
            report.diagnostics.k_vis,
            report.diagnostics.k_ir,
        ));
    }
    std::fs::write(out_dir.join("ablation.csv"), csv)?;
    Ok(())
}
