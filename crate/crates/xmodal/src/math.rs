//! Dense numeric primitives shared by every stage: feature vectors, cosine
//! similarity, temperature softmax, cross-entropy.
//!
//! All similarities in the pipeline are cosine on L2-normalized vectors, so a
//! dot product against a normalized prototype *is* the cosine.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Clamp floor for logarithms.
pub const LOG_EPS: f64 = 1e-12;

/// A dense feature vector of fixed dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVec<S: Scalar> {
    values: Vec<S>,
}

impl<S: Scalar> FeatureVec<S> {
    pub fn new(values: Vec<S>) -> Self {
        debug_assert!(values.iter().all(|v| v.is_finite()));
        FeatureVec { values }
    }

    pub fn zeros(d: usize) -> Self {
        FeatureVec {
            values: vec![S::zero(); d],
        }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn as_slice(&self) -> &[S] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [S] {
        &mut self.values
    }

    pub fn into_vec(self) -> Vec<S> {
        self.values
    }

    pub fn dot(&self, other: &Self) -> S {
        dot(&self.values, &other.values)
    }

    pub fn norm(&self) -> S {
        l2_norm(&self.values)
    }

    pub fn is_normalized(&self, tol: f64) -> bool {
        (self.norm().as_f64() - 1.0).abs() <= tol
    }

    /// Unit-length copy. Errors on the zero vector.
    pub fn normalized(&self) -> Result<Self> {
        let n = self.norm();
        if n == S::zero() {
            return Err(Error::DegenerateVector);
        }
        Ok(FeatureVec::new(
            self.values.iter().map(|&v| v / n).collect(),
        ))
    }

    pub fn scaled(&self, s: S) -> Self {
        FeatureVec::new(self.values.iter().map(|&v| v * s).collect())
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.dim(), other.dim());
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += *b;
        }
    }

    pub fn add_scaled(&mut self, other: &Self, s: S) {
        debug_assert_eq!(self.dim(), other.dim());
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += *b * s;
        }
    }
}

impl<S: Scalar> std::ops::Index<usize> for FeatureVec<S> {
    type Output = S;
    fn index(&self, i: usize) -> &S {
        &self.values[i]
    }
}

pub fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

pub fn l2_norm<S: Scalar>(a: &[S]) -> S {
    dot(a, a).sqrt()
}

/// Mean of a set of equal-dimension vectors.
pub fn mean_vec<S: Scalar>(vs: &[&FeatureVec<S>]) -> FeatureVec<S> {
    assert!(!vs.is_empty());
    let mut acc = FeatureVec::zeros(vs[0].dim());
    for v in vs {
        acc.add_assign(v);
    }
    acc.scaled(S::one() / S::of_usize(vs.len()))
}

/// Cosine similarity a.b / (|a||b|), in [-1, 1].
pub fn cosine_sim<S: Scalar>(a: &FeatureVec<S>, b: &FeatureVec<S>) -> Result<S> {
    if a.dim() != b.dim() {
        return Err(Error::ShapeError {
            expected: format!("dim {}", a.dim()),
            got: format!("dim {}", b.dim()),
        });
    }
    let (na, nb) = (a.norm(), b.norm());
    if na == S::zero() || nb == S::zero() {
        return Err(Error::DegenerateVector);
    }
    let c = a.dot(b) / (na * nb);
    // Guard rounding drift out of [-1, 1].
    Ok(c.min(S::one()).max(-S::one()))
}

/// Pairwise cosine similarity matrix, row-major.
#[derive(Debug, Clone)]
pub struct SimMatrix<S: Scalar> {
    rows: usize,
    cols: usize,
    values: Vec<S>,
}

impl<S: Scalar> SimMatrix<S> {
    pub fn from_sets(rows: &[FeatureVec<S>], cols: &[FeatureVec<S>]) -> Result<Self> {
        let mut values = Vec::with_capacity(rows.len() * cols.len());
        for r in rows {
            for c in cols {
                values.push(cosine_sim(r, c)?);
            }
        }
        Ok(SimMatrix {
            rows: rows.len(),
            cols: cols.len(),
            values,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> S {
        self.values[i * self.cols + j]
    }
}

/// Temperature softmax with max-subtraction for stability.
pub fn softmax<S: Scalar>(logits: &[S], temperature: S) -> Result<Vec<S>> {
    if temperature <= S::zero() {
        return Err(Error::BadTemperature(temperature.as_f64()));
    }
    assert!(!logits.is_empty());
    let max = logits.iter().cloned().fold(S::neg_infinity(), S::max);
    let exps: Vec<S> = logits
        .iter()
        .map(|&z| ((z - max) / temperature).exp())
        .collect();
    let sum: S = exps.iter().cloned().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

/// -sum target_i * log pred_i, with log clamped at [`LOG_EPS`].
pub fn cross_entropy<S: Scalar>(target: &[S], pred: &[S]) -> Result<S> {
    debug_assert_eq!(target.len(), pred.len());
    let eps = S::of(LOG_EPS);
    let mut acc = S::zero();
    for (i, (&t, &p)) in target.iter().zip(pred).enumerate() {
        if t == S::zero() {
            continue;
        }
        if p < S::zero() || (p == S::zero() && eps == S::zero()) {
            return Err(Error::LogOfZero(i));
        }
        acc -= t * p.max(eps).ln();
    }
    Ok(acc)
}
