//! Desk-scale unsupervised cross-modality video re-identification.
//!
//! The pipeline: synthetic confounded tracklet generation, counterfactual
//! intervention warm-up, clustering-based pseudo-label learning, prototype-
//! guided uncertainty refinement, and cross-modality retrieval evaluation.
//!
//! The numeric kernels are generic over the scalar type ([`scalar::Scalar`],
//! implemented for `f32`/`f64`); the pipeline itself runs on the [`Real`]
//! aliases below.

pub mod error;
pub mod math;
pub mod rng;
pub mod scalar;
pub mod synthgen;

pub mod ciw;
pub mod cli;
pub mod cluster;
pub mod encoder;
pub mod eval;
pub mod pgur;
pub mod trainer;

pub use error::{Error, Result};

/// Scalar the pipeline is instantiated at.
pub type Real = f64;
/// Feature vector at pipeline precision.
pub type Feature = math::FeatureVec<Real>;
/// Cosine similarity matrix at pipeline precision.
pub type Similarity = math::SimMatrix<Real>;
/// Encoder parameters at pipeline precision.
pub type Encoder = encoder::EncoderParams<Real>;
