//! Dense numeric kernels shared by the cache, probe, retrieval and cut-off
//! stages.
//!
//! Payloads are stored as `f32`; every reduction accumulates in `f64` and
//! rounds once at the end so results do not depend on summation width.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Norm threshold below which a vector is treated as degenerate.
pub const ZERO_NORM_EPS: f64 = 1e-12;

/// Tolerance on `sum(p) == 1` accepted by [`entropy`].
pub const NORMALIZATION_TOL: f64 = 1e-4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("both operands have norm below {ZERO_NORM_EPS:e}")]
    ZeroNorm,
    #[error("empty input")]
    EmptyInput,
    #[error("probabilities sum to {sum}, expected 1")]
    NotNormalized { sum: f64 },
    #[error("dimension mismatch: {left} vs {right}")]
    DimMismatch { left: usize, right: usize },
}

/// A dense `f32` vector.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DenseVector {
    data: Vec<f32>,
}

impl DenseVector {
    pub fn new(data: Vec<f32>) -> Self {
        Self { data }
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            data: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.data.len()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

impl From<Vec<f32>> for DenseVector {
    fn from(data: Vec<f32>) -> Self {
        Self::new(data)
    }
}

impl From<&[f32]> for DenseVector {
    fn from(data: &[f32]) -> Self {
        Self::new(data.to_vec())
    }
}

/// A row-major dense `f32` matrix.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl DenseMatrix {
    /// Wraps a row-major buffer. Fails if `data.len() != rows * cols`.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self, LinalgError> {
        if data.len() != rows * cols {
            return Err(LinalgError::DimMismatch {
                left: data.len(),
                right: rows * cols,
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// An empty matrix with a fixed column count, ready for [`push_row`](Self::push_row).
    pub fn empty(cols: usize) -> Self {
        Self {
            rows: 0,
            cols,
            data: Vec::new(),
        }
    }

    /// Builds a matrix from equally sized rows.
    pub fn from_rows<R: AsRef<[f32]>>(cols: usize, rows: &[R]) -> Result<Self, LinalgError> {
        let mut m = Self::empty(cols);
        for r in rows {
            m.push_row(r.as_ref())?;
        }
        Ok(m)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl ExactSizeIterator<Item = &[f32]> + '_ {
        (0..self.rows).map(move |i| self.row(i))
    }

    pub fn push_row(&mut self, row: &[f32]) -> Result<(), LinalgError> {
        if row.len() != self.cols {
            return Err(LinalgError::DimMismatch {
                left: row.len(),
                right: self.cols,
            });
        }
        self.data.extend_from_slice(row);
        self.rows += 1;
        Ok(())
    }

    /// Appends all rows of `other` below `self`.
    pub fn extend(&mut self, other: &DenseMatrix) -> Result<(), LinalgError> {
        if other.cols != self.cols {
            return Err(LinalgError::DimMismatch {
                left: other.cols,
                right: self.cols,
            });
        }
        self.data.extend_from_slice(&other.data);
        self.rows += other.rows;
        Ok(())
    }

    /// Copies rows `start..end` into a new matrix.
    pub fn slice_rows(&self, start: usize, end: usize) -> DenseMatrix {
        Self {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        }
    }

    /// Per-column arithmetic mean. Returns the zero vector for a 0-row matrix.
    pub fn column_mean(&self) -> DenseVector {
        if self.rows == 0 {
            return DenseVector::zeros(self.cols);
        }
        let mut acc = vec![0.0f64; self.cols];
        for r in self.row_iter() {
            for (a, &x) in acc.iter_mut().zip(r) {
                *a += x as f64;
            }
        }
        let n = self.rows as f64;
        DenseVector::new(acc.into_iter().map(|a| (a / n) as f32).collect())
    }
}

pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

pub fn l1_norm(v: &[f32]) -> f64 {
    v.iter().map(|&x| (x as f64).abs()).sum()
}

pub fn l2_norm(v: &[f32]) -> f64 {
    v.iter()
        .map(|&x| (x as f64) * (x as f64))
        .sum::<f64>()
        .sqrt()
}

/// Cosine similarity `a·b / (‖a‖‖b‖)`, clamped to `[-1, 1]`.
///
/// Fails with [`LinalgError::ZeroNorm`] when both norms are degenerate. If
/// only one side is degenerate the similarity is reported as 0.
pub fn cosine(a: &[f32], b: &[f32]) -> Result<f64, LinalgError> {
    if a.len() != b.len() {
        return Err(LinalgError::DimMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    let na = l2_norm(a);
    let nb = l2_norm(b);
    if na < ZERO_NORM_EPS && nb < ZERO_NORM_EPS {
        return Err(LinalgError::ZeroNorm);
    }
    if na < ZERO_NORM_EPS || nb < ZERO_NORM_EPS {
        return Ok(0.0);
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Cosine with the degenerate case mapped to 0, as every scoring caller wants.
pub fn cosine_or_zero(a: &[f32], b: &[f32]) -> f64 {
    cosine(a, b).unwrap_or(0.0)
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(scores: &[f64]) -> Result<Vec<f64>, LinalgError> {
    let max = scores
        .iter()
        .copied()
        .fold(None, |m: Option<f64>, x| Some(m.map_or(x, |m| m.max(x))))
        .ok_or(LinalgError::EmptyInput)?;
    let exps: Vec<f64> = scores.iter().map(|&s| (s - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / z).collect())
}

/// Shannon entropy in nats with `0·ln 0 = 0`.
pub fn entropy(probs: &[f64]) -> Result<f64, LinalgError> {
    let sum: f64 = probs.iter().sum();
    if probs.iter().any(|&p| p < 0.0) || (sum - 1.0).abs() > NORMALIZATION_TOL {
        return Err(LinalgError::NotNormalized { sum });
    }
    let h: f64 = probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| -p * p.ln())
        .sum();
    Ok(h.max(0.0))
}

/// `entropy(softmax(scores))`, computed in log space so that very peaked
/// score vectors do not lose mass to underflow.
pub fn softmax_entropy(scores: &[f64]) -> Result<f64, LinalgError> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if scores.is_empty() {
        return Err(LinalgError::EmptyInput);
    }
    let shifted: Vec<f64> = scores.iter().map(|&s| s - max).collect();
    let z: f64 = shifted.iter().map(|&s| s.exp()).sum();
    let log_z = z.ln();
    // H = log Z - Σ p_i s_i  (with shifted scores)
    let expect: f64 = shifted.iter().map(|&s| (s - log_z).exp() * s).sum();
    Ok((log_z - expect).max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn cosine_examples() {
        assert!((cosine(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap() - 1.0).abs() < 1e-6);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        // 1 / sqrt(2)
        assert!(
            (cosine(&[1.0, 1.0], &[1.0, 0.0]).unwrap() - std::f64::consts::FRAC_1_SQRT_2).abs()
                < 1e-6
        );
    }

    #[test]
    fn cosine_degenerate() {
        assert_eq!(cosine(&[0.0, 0.0], &[0.0, 0.0]), Err(LinalgError::ZeroNorm));
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 0.0]), Ok(0.0));
        assert!(matches!(
            cosine(&[1.0], &[1.0, 0.0]),
            Err(LinalgError::DimMismatch { .. })
        ));
    }

    #[test]
    fn softmax_examples() {
        let p = softmax(&[0.0; 4]).unwrap();
        assert!(p.iter().all(|&x| (x - 0.25).abs() < 1e-12));
        let p = softmax(&[1000.0, 1000.0]).unwrap();
        assert_eq!(p, vec![0.5, 0.5]);
        let p = softmax(&[0.0, 3f64.ln()]).unwrap();
        assert!((p[0] - 0.25).abs() < 1e-6 && (p[1] - 0.75).abs() < 1e-6);
        assert_eq!(softmax(&[]), Err(LinalgError::EmptyInput));
    }

    #[test]
    fn entropy_examples() {
        assert!((entropy(&[0.25; 4]).unwrap() - 1.386_294_4).abs() < 1e-6);
        assert_eq!(entropy(&[1.0, 0.0, 0.0]).unwrap(), 0.0);
        assert!((entropy(&[0.25, 0.75]).unwrap() - 0.562_335_1).abs() < 1e-6);
        assert!(matches!(
            entropy(&[0.5, 0.4]),
            Err(LinalgError::NotNormalized { .. })
        ));
        assert!(matches!(
            entropy(&[1.5, -0.5]),
            Err(LinalgError::NotNormalized { .. })
        ));
    }

    #[test]
    fn norm_examples() {
        assert_eq!(l1_norm(&[0.0, 0.0]), 0.0);
        assert_eq!(l2_norm(&[0.0, 0.0]), 0.0);
        assert_eq!(l1_norm(&[3.0, -4.0]), 7.0);
        assert_eq!(l2_norm(&[3.0, -4.0]), 5.0);
        assert_eq!(l1_norm(&[1.0]), 1.0);
        assert_eq!(l2_norm(&[1.0]), 1.0);
    }

    #[test]
    fn matrix_shape_checks() {
        assert!(DenseMatrix::from_vec(2, 2, vec![0.0; 3]).is_err());
        let mut m = DenseMatrix::empty(2);
        m.push_row(&[1.0, 1.0]).unwrap();
        m.push_row(&[3.0, 3.0]).unwrap();
        assert!(m.push_row(&[1.0]).is_err());
        assert_eq!(m.column_mean().as_slice(), &[2.0, 2.0]);
        assert_eq!(m.slice_rows(1, 2).row(0), &[3.0, 3.0]);
    }

    fn nonzero_vec(len: usize) -> impl Strategy<Value = Vec<f32>> {
        prop::collection::vec(-100.0f32..100.0, len).prop_filter("nonzero", |v| l2_norm(v) > 1e-3)
    }

    proptest! {
        #[test]
        fn cosine_self_is_one(a in nonzero_vec(8)) {
            prop_assert!((cosine(&a, &a).unwrap() - 1.0).abs() < 1e-6);
        }

        #[test]
        fn cosine_scale_invariant(a in nonzero_vec(6), b in nonzero_vec(6), s in 0.01f32..100.0) {
            let scaled: Vec<f32> = a.iter().map(|x| x * s).collect();
            let c1 = cosine(&a, &b).unwrap();
            let c2 = cosine(&scaled, &b).unwrap();
            prop_assert!((c1 - c2).abs() < 1e-6);
            prop_assert!((-1.0..=1.0).contains(&c1));
        }

        #[test]
        fn softmax_shift_invariant(s in prop::collection::vec(-50.0f64..50.0, 1..32), c in -1e3f64..1e3) {
            let shifted: Vec<f64> = s.iter().map(|x| x + c).collect();
            let p = softmax(&s).unwrap();
            let q = softmax(&shifted).unwrap();
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            for (a, b) in p.iter().zip(&q) {
                prop_assert!((a - b).abs() < 1e-6);
            }
        }

        #[test]
        fn entropy_bounded_by_log_n(s in prop::collection::vec(-5.0f64..5.0, 1..64)) {
            let h = entropy(&softmax(&s).unwrap()).unwrap();
            let ln_n = (s.len() as f64).ln();
            prop_assert!(h <= ln_n + 1e-9);
            let log_space = softmax_entropy(&s).unwrap();
            prop_assert!((h - log_space).abs() < 1e-9);
        }

        #[test]
        fn entropy_equals_log_n_when_uniform(v in -5.0f64..5.0, n in 1usize..64) {
            let h = entropy(&softmax(&vec![v; n]).unwrap()).unwrap();
            prop_assert!((h - (n as f64).ln()).abs() < 1e-9);
        }
    }
}
