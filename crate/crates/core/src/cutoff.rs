//! Decoding-time dynamic KV cut-off.
//!
//! Each layer's information density is the entropy of its softmax-normalised
//! chunk scores. A flat score distribution (many plausible chunks) is dense;
//! a peaked one is sparse. The shared budget `L × k` is then handed out from
//! the shallowest layer to the deepest: layer ℓ takes the share
//! `Θ^ℓ / (Θ^ℓ + Σ_{j>ℓ} Θ^j)` of whatever is still unassigned, so the last
//! layer always receives the remainder.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::softmax_entropy;
use crate::retrieval::{select_topk, ScoredChunk, SelectionResult};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CutoffError {
    #[error("layer has no scored chunks")]
    EmptyLayer,
    #[error("allocation needs at least one layer")]
    NoLayers,
    #[error("total budget {total} is not a multiple of the unit {unit}")]
    IndivisibleTotal { total: usize, unit: usize },
    #[error("profile lengths differ: {theta} densities, {counts} counts")]
    ProfileShape { theta: usize, counts: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CutoffMode {
    #[default]
    Dynamic,
    Fixed,
}

impl std::fmt::Display for CutoffMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            CutoffMode::Dynamic => "dynamic",
            CutoffMode::Fixed => "fixed",
        })
    }
}

/// Per-layer densities (nats) and the chunk counts they were computed over.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DensityProfile {
    pub theta: Vec<f64>,
    pub n_per_layer: Vec<usize>,
}

impl DensityProfile {
    /// Builds a profile from one score list per layer. Empty layers get
    /// density 0.
    pub fn from_scores<S: AsRef<[f64]>>(per_layer: &[S]) -> Self {
        let mut p = Self::default();
        for s in per_layer {
            let s = s.as_ref();
            p.theta.push(layer_density(s).unwrap_or(0.0));
            p.n_per_layer.push(s.len());
        }
        p
    }

    pub fn layers(&self) -> usize {
        self.theta.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BudgetAllocation {
    /// KV pairs granted to each layer, shallow to deep.
    pub budgets: Vec<usize>,
    pub initial_total: usize,
    /// Set when every density was zero and the total was split evenly.
    pub equal_split: bool,
}

/// `Θ = H(softmax(scores))`.
pub fn layer_density(scores: &[f64]) -> Result<f64, CutoffError> {
    softmax_entropy(scores).map_err(|_| CutoffError::EmptyLayer)
}

/// Real-valued sequential allocation of `total` across layers.
pub fn budget_recurrence(theta: &[f64], total: f64) -> Vec<f64> {
    let l = theta.len();
    let mut remaining = total;
    let mut out = Vec::with_capacity(l);
    for i in 0..l {
        let rest: f64 = theta[i + 1..].iter().sum();
        let denom = theta[i] + rest;
        let b = if i + 1 == l {
            remaining
        } else if denom > 0.0 {
            theta[i] / denom * remaining
        } else {
            remaining / (l - i) as f64
        };
        let b = b.clamp(0.0, remaining.max(0.0));
        out.push(b);
        remaining -= b;
    }
    out
}

/// Largest-remainder (Hamilton) apportionment of `total` whole units in
/// proportion to `quotas`. Leftover units go to the largest fractional
/// parts, lower index first on ties.
pub fn apportion(quotas: &[f64], total: usize) -> Vec<usize> {
    if quotas.is_empty() {
        return Vec::new();
    }
    let sum: f64 = quotas.iter().map(|q| q.max(0.0)).sum();
    let scaled: Vec<f64> = if sum > 0.0 {
        quotas
            .iter()
            .map(|q| q.max(0.0) / sum * total as f64)
            .collect()
    } else {
        vec![total as f64 / quotas.len() as f64; quotas.len()]
    };
    let mut seats: Vec<usize> = scaled.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = seats.iter().sum();
    let mut leftover = total.saturating_sub(assigned);
    let mut order: Vec<usize> = (0..quotas.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = scaled[a] - scaled[a].floor();
        let fb = scaled[b] - scaled[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if leftover == 0 {
            break;
        }
        seats[i] += 1;
        leftover -= 1;
    }
    seats
}

/// Allocates `initial_total` KV pairs across layers, one pair granularity.
pub fn allocate(
    profile: &DensityProfile,
    initial_total: usize,
) -> Result<BudgetAllocation, CutoffError> {
    allocate_in_units(profile, initial_total, 1)
}

/// Allocates `initial_total` pairs in whole multiples of `unit` (the chunk
/// size), preserving the total exactly.
pub fn allocate_in_units(
    profile: &DensityProfile,
    initial_total: usize,
    unit: usize,
) -> Result<BudgetAllocation, CutoffError> {
    let l = profile.layers();
    if l == 0 {
        return Err(CutoffError::NoLayers);
    }
    if profile.n_per_layer.len() != l {
        return Err(CutoffError::ProfileShape {
            theta: l,
            counts: profile.n_per_layer.len(),
        });
    }
    let unit = unit.max(1);
    if !initial_total.is_multiple_of(unit) {
        return Err(CutoffError::IndivisibleTotal {
            total: initial_total,
            unit,
        });
    }
    let units = initial_total / unit;
    let equal_split = profile.theta.iter().all(|&t| t <= 0.0);
    let quotas = if equal_split {
        vec![units as f64 / l as f64; l]
    } else {
        budget_recurrence(&profile.theta, units as f64)
    };
    let budgets = apportion(&quotas, units)
        .into_iter()
        .map(|u| u * unit)
        .collect();
    Ok(BudgetAllocation {
        budgets,
        initial_total,
        equal_split,
    })
}

/// Selects a layer's chunks under its dynamic budget.
pub fn recall_layer(
    scores: &[ScoredChunk],
    budget_pairs: usize,
    chunk_size: usize,
) -> SelectionResult {
    select_topk(scores, budget_pairs, chunk_size)
}
