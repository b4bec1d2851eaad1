//! Activation statistics and probe-query construction.
//!
//! During pre-filling each window's query rows are folded into running
//! per-dimension statistics covering every window seen so far. A token's
//! activation bias is its squared deviation from the running mean, scaled
//! by the running variance; the probe is the query average weighted by each
//! token's total bias. Tokens that sit far from the mean ("anchors") thus
//! dominate the probe instead of being averaged away.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{l1_norm, DenseMatrix, DenseVector};

/// Floor applied to the running variance before dividing by it.
pub const VARIANCE_FLOOR: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProbeError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("statistics undefined: {count} queries seen, need {needed}")]
    StatsUndefined { count: u64, needed: u64 },
    #[error("{weights} weights for {rows} query rows")]
    LengthMismatch { weights: usize, rows: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum ProbeMode {
    /// Activation-bias weighted pooling.
    #[default]
    #[serde(rename = "act", alias = "activation")]
    Activation,
    /// Plain mean pooling (the baseline).
    #[serde(rename = "mean")]
    Mean,
}

impl std::fmt::Display for ProbeMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ProbeMode::Activation => "act",
            ProbeMode::Mean => "mean",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    PreFilling,
    Decoding,
}

/// Running per-dimension mean and sample variance over every query vector
/// folded in so far.
///
/// Stored as count / mean / sum of squared deviations and merged batch-wise
/// (Chan et al.), which is algebraically the sum / sum-of-squares form but
/// does not cancel catastrophically for large offsets.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamingStats {
    count: u64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl StreamingStats {
    pub fn new(dim: usize) -> Self {
        Self {
            count: 0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    /// Folds a window of query rows into the statistics.
    pub fn update(&mut self, window: &DenseMatrix) -> Result<(), ProbeError> {
        if window.cols() != self.dim() {
            return Err(ProbeError::DimMismatch {
                expected: self.dim(),
                got: window.cols(),
            });
        }
        let nb = window.rows() as u64;
        if nb == 0 {
            return Ok(());
        }
        let d = self.dim();
        let mut bmean = vec![0.0f64; d];
        for r in window.row_iter() {
            for (m, &x) in bmean.iter_mut().zip(r) {
                *m += x as f64;
            }
        }
        bmean.iter_mut().for_each(|m| *m /= nb as f64);
        let mut bm2 = vec![0.0f64; d];
        for r in window.row_iter() {
            for ((acc, &x), &m) in bm2.iter_mut().zip(r).zip(&bmean) {
                let dx = x as f64 - m;
                *acc += dx * dx;
            }
        }

        let na = self.count as f64;
        let nbf = nb as f64;
        let n = na + nbf;
        for i in 0..d {
            let delta = bmean[i] - self.mean[i];
            self.mean[i] += delta * nbf / n;
            self.m2[i] += bm2[i] + delta * delta * na * nbf / n;
        }
        self.count += nb;
        Ok(())
    }

    /// Running mean; requires at least one query.
    pub fn mean(&self) -> Option<&[f64]> {
        (self.count >= 1).then_some(self.mean.as_slice())
    }

    /// Sample variance with Bessel's correction; requires two queries.
    pub fn variance(&self) -> Option<Vec<f64>> {
        (self.count >= 2).then(|| {
            let denom = (self.count - 1) as f64;
            self.m2.iter().map(|&s| (s / denom).max(0.0)).collect()
        })
    }
}

/// Folds `window` into `stats` and returns the updated statistics.
pub fn update_stats(
    mut stats: StreamingStats,
    window: &DenseMatrix,
) -> Result<StreamingStats, ProbeError> {
    stats.update(window)?;
    Ok(stats)
}

/// L2 distance of `q` from the running mean; larger means more anchor-like.
pub fn anchor_score(q: &[f32], stats: &StreamingStats) -> Result<f64, ProbeError> {
    let mean = stats.mean().ok_or(ProbeError::StatsUndefined {
        count: stats.count(),
        needed: 1,
    })?;
    if q.len() != mean.len() {
        return Err(ProbeError::DimMismatch {
            expected: mean.len(),
            got: q.len(),
        });
    }
    Ok(q.iter()
        .zip(mean)
        .map(|(&x, &m)| (x as f64 - m).powi(2))
        .sum::<f64>()
        .sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActivationBias {
    /// Token-level bias, one row per query.
    pub phi: DenseMatrix,
    /// Normalised pooling weights, summing to 1.
    pub weights: Vec<f64>,
    /// True when every bias row was zero and `weights` fell back to uniform.
    pub fallback: bool,
}

fn uniform(m: usize) -> Vec<f64> {
    vec![1.0 / m as f64; m]
}

/// Computes the activation bias of `window` against `stats`, which must
/// already include the window.
pub fn activation_bias(
    window: &DenseMatrix,
    stats: &StreamingStats,
) -> Result<ActivationBias, ProbeError> {
    if window.cols() != stats.dim() {
        return Err(ProbeError::DimMismatch {
            expected: stats.dim(),
            got: window.cols(),
        });
    }
    let var = stats.variance().ok_or(ProbeError::StatsUndefined {
        count: stats.count(),
        needed: 2,
    })?;
    let mean = stats.mean().unwrap();

    let mut phi = DenseMatrix::empty(window.cols());
    let mut mass = Vec::with_capacity(window.rows());
    let mut row = vec![0f32; window.cols()];
    for q in window.row_iter() {
        for (((out, &x), &m), &v) in row.iter_mut().zip(q).zip(mean).zip(&var) {
            *out = ((x as f64 - m).powi(2) / v.max(VARIANCE_FLOOR)) as f32;
        }
        mass.push(l1_norm(&row));
        phi.push_row(&row).unwrap();
    }

    let total: f64 = mass.iter().sum();
    let m = window.rows();
    let (weights, fallback) = if m == 0 {
        (Vec::new(), false)
    } else if total > 0.0 && total.is_finite() {
        (mass.iter().map(|x| x / total).collect(), false)
    } else {
        (uniform(m), true)
    };
    Ok(ActivationBias {
        phi,
        weights,
        fallback,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeQuery {
    pub vector: DenseVector,
    pub layer: usize,
    pub head: usize,
    pub stage: Stage,
}

impl ProbeQuery {
    pub fn at(mut self, layer: usize, head: usize) -> Self {
        self.layer = layer;
        self.head = head;
        self
    }
}

/// `Σ_j w_j q_j` over the window rows.
pub fn weighted_pool(window: &DenseMatrix, weights: &[f64]) -> Result<DenseVector, ProbeError> {
    if weights.len() != window.rows() {
        return Err(ProbeError::LengthMismatch {
            weights: weights.len(),
            rows: window.rows(),
        });
    }
    let mut acc = vec![0.0f64; window.cols()];
    for (q, &w) in window.row_iter().zip(weights) {
        for (a, &x) in acc.iter_mut().zip(q) {
            *a += w * x as f64;
        }
    }
    Ok(DenseVector::new(
        acc.into_iter().map(|a| a as f32).collect(),
    ))
}

pub fn build_probe(window: &DenseMatrix, bias: &ActivationBias) -> Result<ProbeQuery, ProbeError> {
    Ok(ProbeQuery {
        vector: weighted_pool(window, &bias.weights)?,
        layer: 0,
        head: 0,
        stage: Stage::PreFilling,
    })
}

/// Mean-pooled probe (uniform weights).
pub fn mean_probe(window: &DenseMatrix) -> ProbeQuery {
    ProbeQuery {
        vector: window.column_mean(),
        layer: 0,
        head: 0,
        stage: Stage::PreFilling,
    }
}

/// During decoding the probe is the current query itself.
pub fn decoding_probe(q: &[f32]) -> ProbeQuery {
    ProbeQuery {
        vector: DenseVector::from(q),
        layer: 0,
        head: 0,
        stage: Stage::Decoding,
    }
}

/// Builds the pre-filling probe for `window` under `mode`. `stats` must
/// already include the window. Activation mode degrades to mean pooling
/// when the statistics are not yet defined or every bias row is zero.
pub fn window_probe(
    window: &DenseMatrix,
    stats: &StreamingStats,
    mode: ProbeMode,
) -> Result<ProbeQuery, ProbeError> {
    match mode {
        ProbeMode::Mean => Ok(mean_probe(window)),
        ProbeMode::Activation => match activation_bias(window, stats) {
            Ok(bias) if bias.fallback => Ok(mean_probe(window)),
            Ok(bias) => build_probe(window, &bias),
            Err(ProbeError::StatsUndefined { .. }) => Ok(mean_probe(window)),
            Err(e) => Err(e),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mat<R: AsRef<[f32]>>(rows: &[R]) -> DenseMatrix {
        DenseMatrix::from_rows(rows[0].as_ref().len(), rows).unwrap()
    }

    /// Direct evaluation of the batch mean / Bessel variance.
    fn batch_stats(rows: &[Vec<f32>]) -> (Vec<f64>, Vec<f64>) {
        let n = rows.len() as f64;
        let d = rows[0].len();
        let mut mean = vec![0.0; d];
        for r in rows {
            for i in 0..d {
                mean[i] += r[i] as f64 / n;
            }
        }
        let mut var = vec![0.0; d];
        for r in rows {
            for i in 0..d {
                var[i] += (r[i] as f64 - mean[i]).powi(2) / (n - 1.0);
            }
        }
        (mean, var)
    }

    #[test]
    fn two_window_example() {
        let mut s = StreamingStats::new(1);
        s.update(&mat(&[&[0.0], &[2.0]])).unwrap();
        s.update(&mat(&[&[4.0]])).unwrap();
        assert_eq!(s.count(), 3);
        assert!((s.mean().unwrap()[0] - 2.0).abs() < 1e-12);
        assert!((s.variance().unwrap()[0] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn single_query_has_no_variance() {
        let s = update_stats(StreamingStats::new(2), &mat(&[&[1.0, 2.0]])).unwrap();
        assert_eq!(s.mean().unwrap(), &[1.0, 2.0]);
        assert!(s.variance().is_none());
        assert!(StreamingStats::new(2).mean().is_none());
    }

    #[test]
    fn identical_queries_have_zero_variance() {
        let s = update_stats(StreamingStats::new(2), &mat(&[&[1.5, -2.0]; 5])).unwrap();
        assert_eq!(s.variance().unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn update_rejects_wrong_width() {
        let mut s = StreamingStats::new(3);
        assert_eq!(
            s.update(&mat(&[&[1.0, 2.0]])),
            Err(ProbeError::DimMismatch {
                expected: 3,
                got: 2
            })
        );
    }

    #[test]
    fn anchor_score_examples() {
        let mut s = StreamingStats::new(2);
        assert!(matches!(
            anchor_score(&[0.0, 0.0], &s),
            Err(ProbeError::StatsUndefined { .. })
        ));
        s.update(&mat(&[&[-1.0, 0.0], &[1.0, 0.0]])).unwrap();
        assert_eq!(anchor_score(&[0.0, 0.0], &s).unwrap(), 0.0);
        assert_eq!(anchor_score(&[3.0, 4.0], &s).unwrap(), 5.0);
        assert!(anchor_score(&[2.0, 0.0], &s).unwrap() > anchor_score(&[1.0, 0.0], &s).unwrap());
    }

    #[test]
    fn bias_scalar_example() {
        // mean 1, variance 4: rows {-1, 1, 3, 1, 1} have mean 1 and
        // Σ(x-1)² = 8 over n-1 = 4.
        let w = mat(&[&[-1.0], &[1.0], &[3.0], &[1.0], &[1.0]]);
        let s = update_stats(StreamingStats::new(1), &w).unwrap();
        assert!((s.variance().unwrap()[0] - 2.0).abs() < 1e-12);
        // Rescale to variance 4 with the same mean.
        let w = mat(&[&[-1.0], &[-1.0], &[3.0], &[3.0], &[1.0]]);
        let s = update_stats(StreamingStats::new(1), &w).unwrap();
        assert!((s.variance().unwrap()[0] - 4.0).abs() < 1e-12);
        let bias = activation_bias(&w, &s).unwrap();
        assert!((bias.phi.row(2)[0] - 1.0).abs() < 1e-6);
        assert_eq!(bias.phi.row(4)[0], 0.0);
        assert!(!bias.fallback);
    }

    #[test]
    fn bias_needs_two_queries() {
        let w = mat(&[&[1.0, 2.0]]);
        let s = update_stats(StreamingStats::new(2), &w).unwrap();
        assert!(matches!(
            activation_bias(&w, &s),
            Err(ProbeError::StatsUndefined {
                count: 1,
                needed: 2
            })
        ));
        let p = window_probe(&w, &s, ProbeMode::Activation).unwrap();
        assert_eq!(p.vector.as_slice(), &[1.0, 2.0]);
    }

    #[test]
    fn identical_rows_fall_back_to_uniform() {
        let w = mat(&[&[2.0, 3.0]; 4]);
        let s = update_stats(StreamingStats::new(2), &w).unwrap();
        let bias = activation_bias(&w, &s).unwrap();
        assert!(bias.fallback);
        assert_eq!(bias.weights, vec![0.25; 4]);
        let act = window_probe(&w, &s, ProbeMode::Activation).unwrap();
        let mean = window_probe(&w, &s, ProbeMode::Mean).unwrap();
        assert_eq!(act, mean);
    }

    #[test]
    fn weight_normalisation_example() {
        // Row bias masses 1 and 3 give weights 1/4 and 3/4.
        let bias = ActivationBias {
            phi: mat(&[&[1.0, 0.0], &[1.0, 2.0]]),
            weights: vec![0.25, 0.75],
            fallback: false,
        };
        let total = l1_norm(bias.phi.row(0)) + l1_norm(bias.phi.row(1));
        assert_eq!(l1_norm(bias.phi.row(0)) / total, 0.25);
        let w = mat(&[&[4.0, 0.0], &[0.0, 4.0]]);
        let p = build_probe(&w, &bias).unwrap();
        assert_eq!(p.vector.as_slice(), &[1.0, 3.0]);
        assert_eq!(p.stage, Stage::PreFilling);
    }

    #[test]
    fn one_hot_weights_select_a_row() {
        let w = mat(&[&[0.1, 0.7], &[-3.3, 9.1], &[5.0, 5.0]]);
        let p = weighted_pool(&w, &[0.0, 1.0, 0.0]).unwrap();
        assert_eq!(p.as_slice(), w.row(1));
        assert!(matches!(
            weighted_pool(&w, &[0.5, 0.5]),
            Err(ProbeError::LengthMismatch {
                weights: 2,
                rows: 3
            })
        ));
    }

    #[test]
    fn uniform_weights_give_mean_pooling() {
        let w = mat(&[&[1.0, 2.0], &[3.0, -2.0], &[5.0, 6.0]]);
        let p = weighted_pool(&w, &uniform(3)).unwrap();
        let m = mean_probe(&w);
        for (a, b) in p.as_slice().iter().zip(m.vector.as_slice()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn decoding_probe_is_identity() {
        let a = decoding_probe(&[1.0, 2.0, 3.0]);
        let b = decoding_probe(&[4.0, 5.0, 6.0]);
        assert_eq!(a.vector.as_slice(), &[1.0, 2.0, 3.0]);
        assert_eq!(a.stage, Stage::Decoding);
        assert_eq!(b.vector.as_slice(), &[4.0, 5.0, 6.0]);
    }

    fn window_strategy() -> impl Strategy<Value = Vec<Vec<f32>>> {
        (1usize..6, 2usize..12).prop_flat_map(|(d, m)| {
            prop::collection::vec(prop::collection::vec(-10.0f32..10.0, d), m)
        })
    }

    proptest! {
        #[test]
        fn streaming_matches_batch(windows in prop::collection::vec(window_strategy(), 1..5)) {
            let d = windows[0][0].len();
            let mut s = StreamingStats::new(d);
            let mut all = Vec::new();
            for w in windows.iter().filter(|w| w[0].len() == d) {
                s.update(&DenseMatrix::from_rows(d, w).unwrap()).unwrap();
                all.extend(w.iter().cloned());
                let (mean, var) = batch_stats(&all);
                for (a, b) in s.mean().unwrap().iter().zip(&mean) {
                    prop_assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0));
                }
                for (a, b) in s.variance().unwrap().iter().zip(&var) {
                    prop_assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0));
                }
            }
        }

        #[test]
        fn probe_is_convex_and_normalised(rows in window_strategy(), prior in window_strategy()) {
            let d = rows[0].len();
            let w = DenseMatrix::from_rows(d, &rows).unwrap();
            let mut s = StreamingStats::new(d);
            if prior[0].len() == d {
                s.update(&DenseMatrix::from_rows(d, &prior).unwrap()).unwrap();
            }
            s.update(&w).unwrap();
            let bias = activation_bias(&w, &s).unwrap();
            prop_assert!((bias.weights.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            prop_assert!(bias.phi.as_slice().iter().all(|&x| x >= 0.0));
            let p = build_probe(&w, &bias).unwrap();
            for i in 0..d {
                let lo = rows.iter().map(|r| r[i]).fold(f32::INFINITY, f32::min);
                let hi = rows.iter().map(|r| r[i]).fold(f32::NEG_INFINITY, f32::max);
                let x = p.vector.as_slice()[i];
                prop_assert!(x >= lo - 1e-5 && x <= hi + 1e-5, "{lo} <= {x} <= {hi}");
            }
        }

        #[test]
        fn anchor_weight_grows_with_deviation(
            base in prop::collection::vec(prop::collection::vec(-1.0f32..1.0, 3), 6..10),
            s1 in 1.5f32..4.0,
            ds in 0.5f32..4.0,
        ) {
            // Row 0 deviates from the others' mean by a factor s; its weight
            // must increase strictly with s.
            let weight_at = |s: f32| {
                let mut rows = base.clone();
                let n = (rows.len() - 1) as f32;
                let centre: Vec<f32> = (0..3)
                    .map(|i| rows[1..].iter().map(|r| r[i]).sum::<f32>() / n)
                    .collect();
                rows[0] = centre.iter().map(|c| c + s * 2.0).collect();
                let w = DenseMatrix::from_rows(3, &rows).unwrap();
                let st = update_stats(StreamingStats::new(3), &w).unwrap();
                activation_bias(&w, &st).unwrap().weights[0]
            };
            prop_assert!(weight_at(s1 + ds) > weight_at(s1));
        }
    }
}
