//! Chunk scoring against a probe and fixed-budget top-k selection.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cache::{CacheView, KvChunk, RepMode};
use crate::linalg::{cosine_or_zero, DenseMatrix};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RetrievalError {
    #[error("chunk {0} not present in cache view")]
    UnknownChunk(u64),
    #[error("head score lists disagree on chunk set")]
    HeadMismatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredChunk {
    pub chunk_id: u64,
    pub score: f64,
    /// Number of KV pairs the chunk would contribute if selected.
    pub pairs: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SelectionResult {
    /// Selected chunk ids, best first.
    pub selected: Vec<u64>,
    pub pairs_used: usize,
}

fn score_one(probe: &[f32], chunk: &KvChunk, mode: RepMode) -> f64 {
    match mode {
        RepMode::Mean => cosine_or_zero(probe, chunk.rep_key.as_slice()),
        RepMode::MaxScore => chunk
            .keys
            .row_iter()
            .map(|k| cosine_or_zero(probe, k))
            .fold(f64::NEG_INFINITY, f64::max),
    }
}

/// Scores every retrievable chunk of one head's view, in chunk order.
pub fn score_chunks(probe: &[f32], view: &CacheView, mode: RepMode) -> Vec<ScoredChunk> {
    view.retrievable()
        .map(|c| ScoredChunk {
            chunk_id: c.chunk_id,
            score: score_one(probe, c, mode),
            pairs: c.len(),
        })
        .collect()
}

/// Averages per-head scores chunk by chunk. Every head must score the same
/// chunk ids in the same order.
pub fn aggregate_heads(per_head: &[Vec<ScoredChunk>]) -> Result<Vec<ScoredChunk>, RetrievalError> {
    let Some(first) = per_head.first() else {
        return Ok(Vec::new());
    };
    if per_head.len() == 1 {
        return Ok(first.clone());
    }
    let n = per_head.len() as f64;
    let mut out = first.clone();
    for head in &per_head[1..] {
        if head.len() != out.len() {
            return Err(RetrievalError::HeadMismatch);
        }
        for (acc, s) in out.iter_mut().zip(head) {
            if acc.chunk_id != s.chunk_id {
                return Err(RetrievalError::HeadMismatch);
            }
            acc.score += s.score;
        }
    }
    out.iter_mut().for_each(|s| s.score /= n);
    Ok(out)
}

/// Greedy top-k by descending score (older chunk first on ties), stopping
/// at the first chunk that no longer fits in `budget_pairs`.
///
/// With equally sized chunks this is exactly the top `budget_pairs / c`.
pub fn select_topk(
    scored: &[ScoredChunk],
    budget_pairs: usize,
    _chunk_size: usize,
) -> SelectionResult {
    let mut order: Vec<&ScoredChunk> = scored.iter().collect();
    // `+ 0.0` folds -0.0 into 0.0 so that the two compare as a tie.
    order.sort_by(|a, b| {
        (b.score + 0.0)
            .total_cmp(&(a.score + 0.0))
            .then_with(|| a.chunk_id.cmp(&b.chunk_id))
    });
    let mut result = SelectionResult::default();
    for s in order {
        if result.pairs_used + s.pairs > budget_pairs {
            break;
        }
        result.pairs_used += s.pairs;
        result.selected.push(s.chunk_id);
    }
    result
}

/// Gathers the selected chunks' keys and values in token order.
pub fn materialize(
    selection: &SelectionResult,
    view: &CacheView,
) -> Result<(DenseMatrix, DenseMatrix), RetrievalError> {
    let index: HashMap<u64, &KvChunk> = view
        .chunks
        .iter()
        .map(|c| c.as_ref())
        .chain(view.open.as_deref())
        .map(|c| (c.chunk_id, c))
        .collect();
    let mut chunks = selection
        .selected
        .iter()
        .map(|id| {
            index
                .get(id)
                .copied()
                .ok_or(RetrievalError::UnknownChunk(*id))
        })
        .collect::<Result<Vec<_>, _>>()?;
    chunks.sort_by_key(|c| c.span.start);

    let d = view.sink_keys.cols();
    let mut keys = DenseMatrix::empty(d);
    let mut values = DenseMatrix::empty(d);
    for c in chunks {
        keys.extend(&c.keys).expect("chunk width");
        values.extend(&c.values).expect("chunk width");
    }
    Ok((keys, values))
}
