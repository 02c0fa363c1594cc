//! Learnable tracklet encoder: per-frame linear projection, temporal average
//! pooling, L2 normalization. Gradients are hand-derived so the whole training
//! stack runs without an autodiff framework.
//!
//! Frame features are normalized individually (the sequence-consistency loss
//! measures L2 distances on them); pooling averages the *unnormalized* frame
//! projections and normalizes the mean.

use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::FeatureVec;
use crate::rng::DetRng;
use crate::scalar::Scalar;
use crate::synthgen::Tracklet;

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams<S: Scalar> {
    /// dim x input_dim, row-major.
    pub w: Vec<S>,
    pub b: Vec<S>,
    pub dim: usize,
    pub input_dim: usize,
}

impl<S: Scalar> EncoderParams<S> {
    pub fn zeros(dim: usize, input_dim: usize) -> Self {
        assert!(dim >= 2);
        EncoderParams {
            w: vec![S::zero(); dim * input_dim],
            b: vec![S::zero(); dim],
            dim,
            input_dim,
        }
    }

    /// Gaussian init scaled by 1/sqrt(input_dim).
    pub fn random(dim: usize, input_dim: usize, rng: &mut DetRng) -> Self {
        let scale = 1.0 / (input_dim as f64).sqrt();
        let mut p = EncoderParams::zeros(dim, input_dim);
        for v in p.w.iter_mut() {
            *v = S::of(rng.normal() * scale);
        }
        p
    }

    pub fn n_params(&self) -> usize {
        self.w.len() + self.b.len()
    }
}

/// Accumulated parameter gradients, same layout as [`EncoderParams`].
#[derive(Debug, Clone)]
pub struct ParamGrad<S: Scalar> {
    pub dw: Vec<S>,
    pub db: Vec<S>,
}

impl<S: Scalar> ParamGrad<S> {
    pub fn zeros(params: &EncoderParams<S>) -> Self {
        ParamGrad {
            dw: vec![S::zero(); params.w.len()],
            db: vec![S::zero(); params.b.len()],
        }
    }

    pub fn add(&mut self, other: &ParamGrad<S>) {
        for (a, b) in self.dw.iter_mut().zip(&other.dw) {
            *a += *b;
        }
        for (a, b) in self.db.iter_mut().zip(&other.db) {
            *a += *b;
        }
    }

    pub fn scale(&mut self, s: S) {
        for v in self.dw.iter_mut() {
            *v *= s;
        }
        for v in self.db.iter_mut() {
            *v *= s;
        }
    }
}

/// Sequence-level feature with its per-frame features.
#[derive(Debug, Clone)]
pub struct SeqFeature<S: Scalar> {
    /// Normalized pooled feature.
    pub f: FeatureVec<S>,
    /// Normalized per-frame features.
    pub frame_feats: Vec<FeatureVec<S>>,
}

struct Forward<S: Scalar> {
    /// Unnormalized per-frame projections u_t = W x_t + b.
    frame_raw: Vec<Vec<S>>,
    frame_norms: Vec<S>,
    /// Unnormalized pooled mean.
    pooled: Vec<S>,
    pooled_norm: S,
}

fn forward<S: Scalar>(params: &EncoderParams<S>, tracklet: &Tracklet) -> Result<Forward<S>> {
    let n = tracklet.dims.len();
    if n != params.input_dim {
        return Err(Error::ShapeError {
            expected: format!("input_dim {}", params.input_dim),
            got: format!("frame len {n}"),
        });
    }
    let d = params.dim;
    let t_len = tracklet.seq_len;
    let mut frame_raw = Vec::with_capacity(t_len);
    let mut frame_norms = Vec::with_capacity(t_len);
    let mut pooled = vec![S::zero(); d];
    for t in 0..t_len {
        let x = tracklet.frame(t);
        let mut u = params.b.clone();
        for (r, u_r) in u.iter_mut().enumerate() {
            let row = &params.w[r * n..(r + 1) * n];
            let mut acc = S::zero();
            for (wv, xv) in row.iter().zip(x) {
                acc += *wv * S::of(*xv);
            }
            *u_r += acc;
        }
        let norm = crate::math::l2_norm(&u);
        if norm == S::zero() {
            return Err(Error::DegenerateVector);
        }
        for (p, uv) in pooled.iter_mut().zip(&u) {
            *p += *uv;
        }
        frame_raw.push(u);
        frame_norms.push(norm);
    }
    let inv_t = S::one() / S::of_usize(t_len);
    for p in pooled.iter_mut() {
        *p *= inv_t;
    }
    let pooled_norm = crate::math::l2_norm(&pooled);
    if pooled_norm == S::zero() {
        return Err(Error::DegenerateVector);
    }
    Ok(Forward {
        frame_raw,
        frame_norms,
        pooled,
        pooled_norm,
    })
}

/// f = normalize(mean_t(W x_t + b)); frame_feats[t] = normalize(W x_t + b).
pub fn encode<S: Scalar>(params: &EncoderParams<S>, tracklet: &Tracklet) -> Result<SeqFeature<S>> {
    let fwd = forward(params, tracklet)?;
    let frame_feats = fwd
        .frame_raw
        .iter()
        .zip(&fwd.frame_norms)
        .map(|(u, &n)| FeatureVec::new(u.iter().map(|&v| v / n).collect()))
        .collect();
    let f = FeatureVec::new(fwd.pooled.iter().map(|&v| v / fwd.pooled_norm).collect());
    Ok(SeqFeature { f, frame_feats })
}

/// Backpropagates an upstream gradient on the pooled feature (and optionally
/// on each normalized frame feature) to parameter gradients.
pub fn backprop<S: Scalar>(
    params: &EncoderParams<S>,
    tracklet: &Tracklet,
    grad_f: &FeatureVec<S>,
    grad_frames: Option<&[FeatureVec<S>]>,
) -> Result<ParamGrad<S>> {
    if grad_f.dim() != params.dim {
        return Err(Error::ShapeError {
            expected: format!("dim {}", params.dim),
            got: format!("grad dim {}", grad_f.dim()),
        });
    }
    let fwd = forward(params, tracklet)?;
    let n = params.input_dim;
    let t_len = tracklet.seq_len;
    let inv_t = S::one() / S::of_usize(t_len);

    // Through f = m / |m|: g_m = (g - (f.g) f) / |m|.
    let f: Vec<S> = fwd.pooled.iter().map(|&v| v / fwd.pooled_norm).collect();
    let fg: S = f.iter().zip(grad_f.as_slice()).map(|(&a, &b)| a * b).sum();
    let g_m: Vec<S> = f
        .iter()
        .zip(grad_f.as_slice())
        .map(|(&fi, &gi)| (gi - fg * fi) / fwd.pooled_norm)
        .collect();

    let mut grad = ParamGrad::zeros(params);
    for t in 0..t_len {
        // Pooling path: du_t = g_m / T.
        let mut g_u: Vec<S> = g_m.iter().map(|&v| v * inv_t).collect();
        // Frame-normalization path, when the loss touches frame features.
        if let Some(gf) = grad_frames {
            let u = &fwd.frame_raw[t];
            let norm = fwd.frame_norms[t];
            let ft: Vec<S> = u.iter().map(|&v| v / norm).collect();
            let dot: S = ft
                .iter()
                .zip(gf[t].as_slice())
                .map(|(&a, &b)| a * b)
                .sum();
            for ((gu, &fi), &gi) in g_u.iter_mut().zip(&ft).zip(gf[t].as_slice()) {
                *gu += (gi - dot * fi) / norm;
            }
        }
        let x = tracklet.frame(t);
        for (r, &g) in g_u.iter().enumerate() {
            if g == S::zero() {
                continue;
            }
            let row = &mut grad.dw[r * n..(r + 1) * n];
            for (wv, &xv) in row.iter_mut().zip(x) {
                *wv += g * S::of(xv);
            }
            grad.db[r] += g;
        }
    }
    Ok(grad)
}

// ---------------------------------------------------------------------------
// Checkpoint file: binary dump of W, b behind a JSON header.
// ---------------------------------------------------------------------------

const CKPT_MAGIC: &[u8; 4] = b"XMC1";

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CheckpointMeta {
    pub dim: usize,
    pub input_dim: usize,
    pub seed: u64,
    pub stage: String,
}

pub fn save_params(params: &EncoderParams<f64>, meta: &CheckpointMeta, path: &Path) -> Result<()> {
    let header = serde_json::to_vec(meta)?;
    let mut buf = Vec::new();
    buf.extend_from_slice(CKPT_MAGIC);
    buf.extend_from_slice(&(header.len() as u32).to_le_bytes());
    buf.extend_from_slice(&header);
    for &v in params.w.iter().chain(&params.b) {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_params(path: &Path) -> Result<(EncoderParams<f64>, CheckpointMeta)> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    if buf.len() < 8 || &buf[..4] != CKPT_MAGIC {
        return Err(Error::Format(format!("{}: bad checkpoint magic", path.display())));
    }
    let hlen = u32::from_le_bytes(buf[4..8].try_into().unwrap()) as usize;
    let header = buf
        .get(8..8 + hlen)
        .ok_or_else(|| Error::Format("truncated checkpoint header".into()))?;
    let meta: CheckpointMeta = serde_json::from_slice(header)
        .map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
    let body = &buf[8 + hlen..];
    let expected = (meta.dim * meta.input_dim + meta.dim) * 8;
    if body.len() != expected {
        return Err(Error::Format(format!(
            "checkpoint body {} bytes, expected {expected}",
            body.len()
        )));
    }
    let vals: Vec<f64> = body
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
        .collect();
    let (w, b) = vals.split_at(meta.dim * meta.input_dim);
    Ok((
        EncoderParams {
            w: w.to_vec(),
            b: b.to_vec(),
            dim: meta.dim,
            input_dim: meta.input_dim,
        },
        meta,
    ))
}

// Used by trainer checkpoints as well.
pub fn write_checkpoint_section(params: &EncoderParams<f64>, out: &mut Vec<u8>) {
    for &v in params.w.iter().chain(&params.b) {
        out.extend_from_slice(&v.to_le_bytes());
    }
}
