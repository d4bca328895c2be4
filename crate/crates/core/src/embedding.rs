//! Feature storage and the exponential pairwise similarity.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Norms below this are treated as zero by [`l2_normalize`].
pub const ZERO_NORM: f64 = 1e-12;

/// Tolerance on row norms for a matrix flagged as normalized.
pub const UNIT_NORM_TOL: f64 = 1e-6;

/// A finite, non-empty feature vector.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureVector(Vec<f64>);

impl FeatureVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::DimensionMismatch {
                expected: 1,
                got: 0,
            });
        }
        if values.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite);
        }
        Ok(Self(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        norm(&self.0)
    }
}

impl AsRef<[f64]> for FeatureVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub(crate) fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Scales `v` to unit L2 norm.
pub fn l2_normalize(v: &FeatureVector) -> Result<FeatureVector> {
    let n = v.norm();
    if n < ZERO_NORM {
        return Err(Error::ZeroVector);
    }
    Ok(FeatureVector(v.0.iter().map(|x| x / n).collect()))
}

pub(crate) fn normalize_in_place(v: &mut [f64]) -> Result<()> {
    let n = norm(v);
    if n < ZERO_NORM {
        return Err(Error::ZeroVector);
    }
    v.iter_mut().for_each(|x| *x /= n);
    Ok(())
}

/// Per-item metadata. `true_identity` is hidden ground truth used only for
/// evaluation; `pseudo_label` is the free class label of virtual data.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemMeta {
    pub item_id: u64,
    pub camera_id: u32,
    pub true_identity: Option<u64>,
    pub pseudo_label: Option<u64>,
}

/// `n` feature rows stored row-major, with metadata.
///
/// Rows are kept in strictly ascending `item_id` order, so row index order
/// and item id order agree. Every tie-break in the crate relies on this.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingMatrix {
    dim: usize,
    num_cameras: u32,
    data: Vec<f64>,
    meta: Vec<ItemMeta>,
    normalized: bool,
}

impl EmbeddingMatrix {
    pub fn new(rows: Vec<FeatureVector>, meta: Vec<ItemMeta>, num_cameras: u32) -> Result<Self> {
        let dim = rows.first().map(FeatureVector::dim).unwrap_or(1);
        let mut data = Vec::with_capacity(rows.len() * dim);
        for r in &rows {
            if r.dim() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: r.dim(),
                });
            }
            data.extend_from_slice(r.as_slice());
        }
        Self::from_flat(dim, data, meta, num_cameras)
    }

    /// Builds a matrix from row-major data. Validates shape, finiteness,
    /// camera ids and id ordering.
    pub fn from_flat(
        dim: usize,
        data: Vec<f64>,
        meta: Vec<ItemMeta>,
        num_cameras: u32,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("d", "feature dimension must be positive"));
        }
        if num_cameras == 0 {
            return Err(Error::invalid("num_cameras", "must be at least 1"));
        }
        if data.len() != meta.len() * dim {
            return Err(Error::DimensionMismatch {
                expected: meta.len() * dim,
                got: data.len(),
            });
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite);
        }
        for (i, m) in meta.iter().enumerate() {
            if m.camera_id >= num_cameras {
                return Err(Error::invalid(
                    "camera_id",
                    format!(
                        "item {} has camera {} >= {num_cameras}",
                        m.item_id, m.camera_id
                    ),
                ));
            }
            if i > 0 && meta[i - 1].item_id >= m.item_id {
                return Err(Error::invalid(
                    "item_id",
                    "item ids must be unique and stored in ascending order",
                ));
            }
        }
        Ok(Self {
            dim,
            num_cameras,
            data,
            meta,
            normalized: false,
        })
    }

    pub fn len(&self) -> usize {
        self.meta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.meta.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_cameras(&self) -> u32 {
        self.num_cameras
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn meta(&self) -> &[ItemMeta] {
        &self.meta
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn has_ground_truth(&self) -> bool {
        self.meta.iter().all(|m| m.true_identity.is_some())
    }

    /// Returns a copy with every row scaled to unit norm.
    pub fn normalized(&self) -> Result<Self> {
        let mut out = self.clone();
        out.data
            .par_chunks_exact_mut(self.dim)
            .try_for_each(normalize_in_place)?;
        out.normalized = true;
        Ok(out)
    }

    /// Replaces the feature rows, keeping metadata. The result is not
    /// flagged as normalized.
    pub fn with_data(&self, dim: usize, data: Vec<f64>) -> Result<Self> {
        Self::from_flat(dim, data, self.meta.clone(), self.num_cameras)
    }

    /// Rows at `indices`, with their metadata, in the given order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        let mut meta = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(self.row(i));
            meta.push(self.meta[i]);
        }
        let mut out = Self::from_flat(self.dim, data, meta, self.num_cameras)?;
        out.normalized = self.normalized;
        Ok(out)
    }
}

/// Dense symmetric `n x n` similarity matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix {
    n: usize,
    values: Vec<f64>,
}

impl SimilarityMatrix {
    /// Wraps precomputed values. Intended for tests and hand-built
    /// instances; checks shape and symmetry only.
    pub fn from_values(n: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != n * n {
            return Err(Error::DimensionMismatch {
                expected: n * n,
                got: values.len(),
            });
        }
        for p in 0..n {
            for q in 0..p {
                if (values[p * n + q] - values[q * n + p]).abs() >= 1e-9 {
                    return Err(Error::format(
                        "similarity matrix",
                        format!("not symmetric at ({p}, {q})"),
                    ));
                }
            }
        }
        Ok(Self { n, values })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, p: usize, q: usize) -> f64 {
        self.values[p * self.n + q]
    }

    pub fn row(&self, p: usize) -> &[f64] {
        &self.values[p * self.n..(p + 1) * self.n]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// SHA-256 over the little-endian bytes of every entry, hex encoded.
    pub fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update((self.n as u64).to_le_bytes());
        for v in &self.values {
            hasher.update(v.to_le_bytes());
        }
        hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

/// `S[p][q] = exp(-||v_p - v_q||_2)` over all pairs of a normalized matrix.
///
/// Distances are clamped to `[0, 2]`, the exact range for unit vectors, so
/// rounding can never push an entry below `exp(-2)`.
pub fn pairwise_similarity(e: &EmbeddingMatrix) -> Result<SimilarityMatrix> {
    if !e.is_normalized() {
        return Err(Error::NotNormalized);
    }
    let n = e.len();
    let mut values = vec![0.0; n * n];
    if n > 0 {
        values.par_chunks_mut(n).enumerate().for_each(|(p, row)| {
            let vp = e.row(p);
            for (q, s) in row.iter_mut().enumerate() {
                *s = if p == q {
                    1.0
                } else {
                    (-euclidean(vp, e.row(q)).min(2.0)).exp()
                };
            }
        });
    }
    Ok(SimilarityMatrix { n, values })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn meta(n: usize, cams: u32) -> Vec<ItemMeta> {
        (0..n)
            .map(|i| ItemMeta {
                item_id: i as u64,
                camera_id: (i as u32) % cams,
                true_identity: None,
                pseudo_label: None,
            })
            .collect()
    }

    fn matrix(rows: &[&[f64]]) -> EmbeddingMatrix {
        let rows = rows
            .iter()
            .map(|r| FeatureVector::new(r.to_vec()).unwrap())
            .collect();
        EmbeddingMatrix::new(rows, meta(2, 1), 1).unwrap()
    }

    #[test]
    fn normalize_three_four_five() {
        let v = l2_normalize(&FeatureVector::new(vec![3.0, 4.0]).unwrap()).unwrap();
        assert_eq!(v.as_slice(), &[0.6, 0.8]);
        let v = l2_normalize(&FeatureVector::new(vec![1.0, 0.0, 0.0]).unwrap()).unwrap();
        assert_eq!(v.as_slice(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn normalize_zero_vector_fails() {
        let err = l2_normalize(&FeatureVector::new(vec![0.0, 0.0]).unwrap()).unwrap_err();
        assert!(matches!(err, Error::ZeroVector));
    }

    #[test]
    fn feature_vector_rejects_nan() {
        assert!(matches!(
            FeatureVector::new(vec![1.0, f64::NAN]),
            Err(Error::NonFinite)
        ));
    }

    #[test]
    fn similarity_examples() {
        let e = matrix(&[&[1.0, 0.0], &[0.0, 1.0]]).normalized().unwrap();
        let s = pairwise_similarity(&e).unwrap();
        assert_eq!(s.get(0, 0), 1.0);
        assert!((s.get(0, 1) - 0.243_116_734_434_214_2).abs() < 1e-12);

        let e = matrix(&[&[1.0, 0.0], &[-1.0, 0.0]]).normalized().unwrap();
        let s = pairwise_similarity(&e).unwrap();
        assert!((s.get(0, 1) - 0.135_335_283_236_612_7).abs() < 1e-12);

        let e = matrix(&[&[0.3, 0.4], &[0.6, 0.8]]).normalized().unwrap();
        assert_eq!(pairwise_similarity(&e).unwrap().get(0, 1), 1.0);
    }

    #[test]
    fn similarity_requires_normalization() {
        let e = matrix(&[&[1.0, 0.0], &[0.0, 1.0]]);
        assert!(matches!(pairwise_similarity(&e), Err(Error::NotNormalized)));
    }

    #[test]
    fn rejects_unsorted_ids_and_bad_cameras() {
        let mut m = meta(2, 1);
        m.swap(0, 1);
        assert!(EmbeddingMatrix::from_flat(1, vec![1.0, 2.0], m, 1).is_err());
        let mut m = meta(2, 1);
        m[1].camera_id = 3;
        assert!(EmbeddingMatrix::from_flat(1, vec![1.0, 2.0], m, 2).is_err());
    }
}
