//! Similarity, proximity and confidence: the coordinates prototype selection
//! works in.

use rayon::prelude::*;

use crate::dataset::Dataset;
use crate::error::{Error, Result};

pub const DEFAULT_S_C_PERCENTILE: f64 = 20.0;

fn dot_norms(a: &[f32], b: &[f32]) -> (f64, f64, f64) {
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    (dot, na.sqrt(), nb.sqrt())
}

pub(crate) fn norm(a: &[f32]) -> f64 {
    a.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt()
}

pub(crate) fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

/// Cosine of the angle between `a` and `b`, clamped to `[-1, 1]`.
pub fn cosine_similarity(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Invalid(format!(
            "vector lengths differ: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let (dot, na, nb) = dot_norms(a, b);
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Invalid("cosine similarity of a zero-norm vector".into()));
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Symmetric matrix of pairwise cosine similarities over a set of sample ids.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    pub indices: Vec<usize>,
    values: Vec<f64>,
}

impl SimilarityMatrix {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Entry for local positions `i`, `j` (not dataset ids).
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.len() + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let m = self.len();
        &self.values[i * m..(i + 1) * m]
    }

    /// Strict upper-triangle entries in row-major order.
    pub fn upper_triangle(&self) -> Vec<f64> {
        let m = self.len();
        let mut out = Vec::with_capacity(m * m.saturating_sub(1) / 2);
        for i in 0..m {
            out.extend_from_slice(&self.row(i)[i + 1..]);
        }
        out
    }

    /// Builds the matrix for any number of ids, including one. Each upper
    /// entry is computed once and mirrored; rows are computed in parallel but
    /// every entry uses the same operand order, so results do not depend on
    /// the thread count.
    pub(crate) fn build(ds: &Dataset, indices: &[usize]) -> Self {
        let m = indices.len();
        let norms: Vec<f64> = indices.iter().map(|&i| norm(ds.embedding(i))).collect();
        let upper: Vec<Vec<f64>> = (0..m)
            .into_par_iter()
            .map(|i| {
                let a = ds.embedding(indices[i]);
                ((i + 1)..m)
                    .map(|j| {
                        let b = ds.embedding(indices[j]);
                        (dot(a, b) / (norms[i] * norms[j])).clamp(-1.0, 1.0)
                    })
                    .collect()
            })
            .collect();
        let mut values = vec![0.0; m * m];
        for (i, row) in upper.iter().enumerate() {
            values[i * m + i] = 1.0;
            for (k, &v) in row.iter().enumerate() {
                let j = i + 1 + k;
                values[i * m + j] = v;
                values[j * m + i] = v;
            }
        }
        SimilarityMatrix {
            indices: indices.to_vec(),
            values,
        }
    }
}

/// Pairwise cosine similarity matrix over at least two samples.
pub fn similarity_matrix(ds: &Dataset, indices: &[usize]) -> Result<SimilarityMatrix> {
    if indices.len() < 2 {
        return Err(Error::Invalid(format!(
            "similarity matrix needs at least 2 samples, got {}",
            indices.len()
        )));
    }
    if let Some(&bad) = indices.iter().find(|&&i| i >= ds.n) {
        return Err(Error::Invalid(format!("sample id {bad} out of range")));
    }
    Ok(SimilarityMatrix::build(ds, indices))
}

/// Nearest-rank percentile of the strict upper triangle.
///
/// A one-sample matrix has no off-diagonal entries; its threshold is 1.
pub fn threshold_s_c(matrix: &SimilarityMatrix, percentile: f64) -> Result<f64> {
    if !(percentile > 0.0 && percentile < 100.0) {
        return Err(Error::Config(format!(
            "s_c percentile must lie in (0, 100), got {percentile}"
        )));
    }
    let mut upper = matrix.upper_triangle();
    if upper.is_empty() {
        return Ok(1.0);
    }
    upper.sort_by(f64::total_cmp);
    let rank = ((percentile / 100.0) * upper.len() as f64).ceil() as usize;
    Ok(upper[rank.clamp(1, upper.len()) - 1])
}

fn sign(x: f64) -> i64 {
    if x > 0.0 {
        1
    } else if x < 0.0 {
        -1
    } else {
        0
    }
}

/// Signed count of neighbours above the threshold, self included.
pub fn proximity(matrix: &SimilarityMatrix, s_c: f64) -> Vec<i64> {
    (0..matrix.len())
        .map(|i| matrix.row(i).iter().map(|&s| sign(s - s_c)).sum())
        .collect()
}

/// Per-sample min-max scaling to `[0, 1]`; a constant vector maps to all 0.5.
pub fn scale_logits(raw: &[f64]) -> Result<Vec<f64>> {
    if raw.iter().any(|v| !v.is_finite()) {
        return Err(Error::Invalid("non-finite logit".into()));
    }
    let min = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let max = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == min {
        return Ok(vec![0.5; raw.len()]);
    }
    let span = max - min;
    Ok(raw.iter().map(|&x| (x - min) / span).collect())
}

/// Gap between the largest and second largest scaled logits.
pub fn confidence(scaled: &[f64]) -> Result<f64> {
    if scaled.len() < 2 {
        return Err(Error::Invalid(format!(
            "confidence needs at least 2 logits, got {}",
            scaled.len()
        )));
    }
    let (mut top1, mut top2) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for &v in scaled {
        if v > top1 {
            top2 = top1;
            top1 = v;
        } else if v > top2 {
            top2 = v;
        }
    }
    Ok((top1 - top2).abs())
}

/// Confidence of one sample from its raw logits, or 1.0 when the dataset has
/// no logits (which switches the confidence criterion off).
pub fn sample_confidence(ds: &Dataset, i: usize) -> Result<f64> {
    match ds.logit_row(i) {
        Some(row) => {
            let raw: Vec<f64> = row.iter().map(|&v| v as f64).collect();
            confidence(&scale_logits(&raw)?)
        }
        None => Ok(1.0),
    }
}

/// Similarity, proximity and confidence for every sample of one class.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassMetrics {
    pub matrix: SimilarityMatrix,
    pub s_c: f64,
    pub proximity: Vec<i64>,
    pub confidence: Vec<f64>,
}

impl ClassMetrics {
    pub fn compute(ds: &Dataset, ids: &[usize], percentile: f64) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::Invalid("class has no samples".into()));
        }
        let matrix = SimilarityMatrix::build(ds, ids);
        let s_c = threshold_s_c(&matrix, percentile)?;
        let proximity = proximity(&matrix, s_c);
        let confidence = ids
            .iter()
            .map(|&i| sample_confidence(ds, i))
            .collect::<Result<Vec<_>>>()?;
        Ok(ClassMetrics {
            matrix,
            s_c,
            proximity,
            confidence,
        })
    }

    /// Assembles metrics from precomputed parts. Used for hand-built cases.
    pub fn from_parts(
        indices: Vec<usize>,
        similarities: Vec<f64>,
        proximity: Vec<i64>,
        confidence: Vec<f64>,
    ) -> Result<Self> {
        let m = indices.len();
        if similarities.len() != m * m || proximity.len() != m || confidence.len() != m {
            return Err(Error::Invalid("metric parts have inconsistent sizes".into()));
        }
        Ok(ClassMetrics {
            matrix: SimilarityMatrix {
                indices,
                values: similarities,
            },
            s_c: f64::NAN,
            proximity,
            confidence,
        })
    }

    pub fn ids(&self) -> &[usize] {
        &self.matrix.indices
    }

    pub fn len(&self) -> usize {
        self.matrix.len()
    }

    pub fn is_empty(&self) -> bool {
        self.matrix.is_empty()
    }
}
