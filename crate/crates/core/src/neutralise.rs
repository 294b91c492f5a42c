// SPDX-License-Identifier: MIT OR Apache-2.0

//! Language centroids and centroid subtraction.
//!
//! Notation: `u` rows are raw encoder output, `v` rows are the neutralised
//! result `v_i = u_i - mean(u)`. Self-neutralisation subtracts a language's
//! own centroid; cross-neutralisation subtracts another language's.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::corpus::LanguageId;
use crate::embedding::{Dtype, EmbeddingHeader, EmbeddingMatrix, HeaderSummary};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LanguageCentroid {
    pub language: LanguageId,
    pub vector: Vec<f64>,
    pub source_count: usize,
    pub provenance: HeaderSummary,
}

impl LanguageCentroid {
    pub fn dim(&self) -> usize {
        self.vector.len()
    }

    /// The centroid as a 1 x dim f64 matrix, storable with `write_embeddings`.
    pub fn to_matrix(&self) -> Result<EmbeddingMatrix> {
        let mut header = EmbeddingHeader::new(
            self.language.clone(),
            &self.provenance.encoder,
            self.provenance.layer,
            self.dim(),
            1,
            Dtype::F64,
        );
        header.encoder_depth = header.encoder_depth.max(self.provenance.layer);
        header.provenance = format!("centroid:n={}", self.source_count);
        EmbeddingMatrix::new(header, self.vector.clone())
    }
}

/// Column means over all rows, accumulated in f64.
pub fn compute_centroid(matrix: &EmbeddingMatrix) -> Result<LanguageCentroid> {
    compute_centroid_over(matrix, 0..matrix.count())
}

/// Column means over `rows` only (for a held-out centroid estimate).
pub fn compute_centroid_over(matrix: &EmbeddingMatrix, rows: Range<usize>) -> Result<LanguageCentroid> {
    if rows.is_empty() || rows.end > matrix.count() {
        return Err(Error::Validation(format!(
            "centroid rows {rows:?} invalid for {} rows of {}",
            matrix.count(),
            matrix.language()
        )));
    }
    let dim = matrix.dim();
    let mut sum = vec![0.0f64; dim];
    for i in rows.clone() {
        for (s, v) in sum.iter_mut().zip(matrix.row(i)) {
            *s += v;
        }
    }
    let n = rows.len() as f64;
    let vector: Vec<f64> = sum.into_iter().map(|s| s / n).collect();
    if let Some(j) = vector.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!(
            "centroid of {} is not finite at column {j}",
            matrix.language()
        )));
    }
    Ok(LanguageCentroid {
        language: matrix.language().clone(),
        vector,
        source_count: rows.len(),
        provenance: matrix.header().summary(),
    })
}

/// `v_i = u_i - centroid` for every row. Keeps the input dtype.
pub fn cross_neutralise(matrix: &EmbeddingMatrix, centroid: &LanguageCentroid) -> Result<EmbeddingMatrix> {
    if centroid.dim() != matrix.dim() {
        return Err(Error::DimensionMismatch {
            expected: matrix.dim(),
            actual: centroid.dim(),
        });
    }
    let mut data = Vec::with_capacity(matrix.data().len());
    for row in matrix.rows() {
        data.extend(row.iter().zip(&centroid.vector).map(|(u, c)| u - c));
    }
    let mut header = matrix.header().clone();
    header.provenance = format!("neutralised:{}", centroid.language);
    EmbeddingMatrix::new(header, data)
}

pub fn self_neutralise(matrix: &EmbeddingMatrix) -> Result<EmbeddingMatrix> {
    let centroid = compute_centroid(matrix)?;
    cross_neutralise(matrix, &centroid)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn matrix(rows: &[Vec<f64>], dtype: Dtype) -> EmbeddingMatrix {
        let h = EmbeddingHeader::new(LanguageId::new("es").unwrap(), "test", 12, rows[0].len(), rows.len(), dtype);
        EmbeddingMatrix::from_rows(h, rows).unwrap()
    }

    #[test]
    fn centroid_is_the_mean() {
        let m = matrix(&[vec![1.0, 1.0], vec![3.0, 3.0]], Dtype::F64);
        assert_eq!(compute_centroid(&m).unwrap().vector, vec![2.0, 2.0]);
        let m = matrix(&[vec![5.0, -5.0]], Dtype::F32);
        let c = compute_centroid(&m).unwrap();
        assert_eq!(c.vector, vec![5.0, -5.0]);
        assert_eq!(c.source_count, 1);
    }

    #[test]
    fn self_neutralise_by_hand() {
        let m = matrix(&[vec![1.0, 1.0], vec![3.0, 3.0]], Dtype::F64);
        let v = self_neutralise(&m).unwrap();
        assert_eq!(v.data(), &[-1.0, -1.0, 1.0, 1.0]);
        assert_eq!(v.header().provenance, "neutralised:es");
    }

    #[test]
    fn identical_rows_become_zero() {
        let m = matrix(&vec![vec![0.3, -7.25, 1e-3]; 5], Dtype::F64);
        let v = self_neutralise(&m).unwrap();
        assert!(v.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn cross_with_own_centroid_is_self() {
        let m = matrix(&[vec![1.0, 0.5], vec![0.25, 3.0], vec![-2.0, 1.0]], Dtype::F32);
        let c = compute_centroid(&m).unwrap();
        let a = cross_neutralise(&m, &c).unwrap();
        let b = self_neutralise(&m).unwrap();
        assert_eq!(a.to_bytes().unwrap(), b.to_bytes().unwrap());
    }

    #[test]
    fn cross_subtracts_other_centroid() {
        let m = matrix(&[vec![1.0, 0.0]], Dtype::F64);
        let other = matrix(&[vec![1.0, 0.0]], Dtype::F64);
        let v = cross_neutralise(&m, &compute_centroid(&other).unwrap()).unwrap();
        assert_eq!(v.data(), &[0.0, 0.0]);
    }

    #[test]
    fn dimension_mismatch() {
        let m = matrix(&[vec![1.0, 0.0]], Dtype::F64);
        let other = matrix(&[vec![1.0, 0.0, 2.0]], Dtype::F64);
        let err = cross_neutralise(&m, &compute_centroid(&other).unwrap()).unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch { expected: 2, actual: 3 }));
    }

    #[test]
    fn held_out_rows() {
        let m = matrix(&[vec![1.0], vec![2.0], vec![6.0]], Dtype::F64);
        assert_eq!(compute_centroid_over(&m, 1..3).unwrap().vector, vec![4.0]);
        assert!(compute_centroid_over(&m, 2..2).is_err());
        assert!(compute_centroid_over(&m, 0..4).is_err());
    }

    #[test]
    fn centroid_matrix_round_trips() {
        let m = matrix(&[vec![1.0, 2.0], vec![3.0, 5.0]], Dtype::F32);
        let c = compute_centroid(&m).unwrap();
        let cm = c.to_matrix().unwrap();
        assert_eq!(cm.count(), 1);
        assert_eq!(cm.data(), &[2.0, 3.5]);
        let back = EmbeddingMatrix::from_bytes(&cm.to_bytes().unwrap()).unwrap();
        assert_eq!(back, cm);
    }
}
