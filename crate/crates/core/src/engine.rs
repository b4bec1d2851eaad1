//! The inference loop over a trace.
//!
//! Pre-filling processes one window at a time: per (layer, head) the running
//! query statistics absorb the window, a probe is built, retrievable chunks
//! are scored (head scores averaged per layer) and the top `k` pairs are
//! gathered. Attention then runs over `[sinks ∥ retrieved ∥ local ∥ window]`
//! with a causal mask inside the window, after which the window's pairs are
//! appended to the cache.
//!
//! Decoding uses the current query as the probe. In dynamic cut-off mode
//! every layer is scored first, the layer densities split `L × k` across
//! layers, and only then does each layer select and attend.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cache::{CacheConfig, CacheError, CacheView, KvCache, LayerCache, RepMode};
use crate::cutoff::{
    allocate_in_units, layer_density, recall_layer, CutoffError, CutoffMode, DensityProfile,
};
use crate::linalg::{dot, softmax, DenseMatrix};
use crate::probe::{decoding_probe, window_probe, ProbeError, ProbeMode, Stage, StreamingStats};
use crate::retrieval::{
    aggregate_heads, materialize, score_chunks, select_topk, RetrievalError, ScoredChunk,
};
use crate::trace::{Trace, WindowBlock};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Cache(#[from] CacheError),
    #[error(transparent)]
    Probe(#[from] ProbeError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Cutoff(#[from] CutoffError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EngineConfig {
    /// Model width; each head works on `dim / heads` columns.
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    /// Pre-filling window size.
    pub window: usize,
    pub chunk_size: usize,
    pub n_sink: usize,
    pub n_local: usize,
    /// Retrieved pairs per layer (`k`).
    pub budget: usize,
    pub probe_mode: ProbeMode,
    pub cutoff_mode: CutoffMode,
    pub rep_mode: RepMode,
    pub seed: u64,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            layers: 4,
            heads: 1,
            window: 256,
            chunk_size: 32,
            n_sink: 64,
            n_local: 512,
            budget: 1472,
            probe_mode: ProbeMode::Activation,
            cutoff_mode: CutoffMode::Dynamic,
            rep_mode: RepMode::Mean,
            seed: 7,
        }
    }
}

impl EngineConfig {
    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// Historical pairs a layer may attend to under a fixed budget.
    pub fn total_budget(&self) -> usize {
        self.n_sink + self.n_local + self.budget
    }

    pub fn cache_config(&self) -> CacheConfig {
        CacheConfig {
            n_sink: self.n_sink,
            chunk_size: self.chunk_size,
            n_local: self.n_local,
            dim: self.head_dim(),
        }
    }

    pub fn validate(&self) -> Result<(), EngineError> {
        let err = |m: String| Err(EngineError::Config(m));
        if self.dim == 0
            || self.layers == 0
            || self.heads == 0
            || self.window == 0
            || self.chunk_size == 0
        {
            return err("dim, layers, heads, window and chunk size must be positive".into());
        }
        if !self.dim.is_multiple_of(self.heads) {
            return err(format!(
                "dim {} not divisible by heads {}",
                self.dim, self.heads
            ));
        }
        if !self.budget.is_multiple_of(self.chunk_size) {
            return err(format!(
                "budget {} not divisible by chunk size {}",
                self.budget, self.chunk_size
            ));
        }
        Ok(())
    }
}

/// Per-layer observations for one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRecord {
    pub layer: usize,
    /// Probe vector per head.
    pub probe: Vec<Vec<f32>>,
    /// Head-averaged chunk scores, in chunk order.
    pub scores: Vec<ScoredChunk>,
    /// Information density of `scores` (0 when there are none).
    pub theta: f64,
    /// Pair budget granted to this layer.
    pub budget: usize,
    pub selected: Vec<u64>,
    /// Sinks + retrieved + local pairs attended (excludes the current window).
    pub attended_history: usize,
    /// Sum of the attention output over heads.
    pub checksum: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub stage: Stage,
    pub layers: Vec<LayerRecord>,
}

/// Full softmax attention. With `causal`, the last `q.rows()` key rows are
/// the query block itself and query `i` sees only the first `i + 1` of them.
pub fn reference_attention(
    q: &DenseMatrix,
    k: &DenseMatrix,
    v: &DenseMatrix,
    causal: bool,
) -> Result<DenseMatrix, EngineError> {
    let weights = attention_weights(q, k, causal)?;
    if v.rows() != k.rows() {
        return Err(EngineError::ShapeMismatch(format!(
            "{} keys but {} values",
            k.rows(),
            v.rows()
        )));
    }
    let mut out = DenseMatrix::zeros(q.rows(), v.cols());
    let mut acc = vec![0.0f64; v.cols()];
    for (i, w) in weights.iter().enumerate() {
        acc.iter_mut().for_each(|a| *a = 0.0);
        for (j, &p) in w.iter().enumerate() {
            for (a, &x) in acc.iter_mut().zip(v.row(j)) {
                *a += p * x as f64;
            }
        }
        for (o, a) in out.row_mut(i).iter_mut().zip(&acc) {
            *o = *a as f32;
        }
    }
    Ok(out)
}

/// Row-normalised attention weights `softmax(q kᵀ / sqrt(d))`; masked
/// positions are omitted from each row.
pub fn attention_weights(
    q: &DenseMatrix,
    k: &DenseMatrix,
    causal: bool,
) -> Result<Vec<Vec<f64>>, EngineError> {
    if q.cols() != k.cols() {
        return Err(EngineError::ShapeMismatch(format!(
            "query width {} vs key width {}",
            q.cols(),
            k.cols()
        )));
    }
    if k.rows() == 0 || (causal && q.rows() > k.rows()) {
        return Err(EngineError::ShapeMismatch(format!(
            "{} queries against {} keys",
            q.rows(),
            k.rows()
        )));
    }
    let scale = 1.0 / (q.cols() as f64).sqrt();
    let prefix = k.rows() - q.rows();
    (0..q.rows())
        .map(|i| {
            let visible = if causal { prefix + i + 1 } else { k.rows() };
            let logits: Vec<f64> = (0..visible)
                .map(|j| dot(q.row(i), k.row(j)) * scale)
                .collect();
            softmax(&logits).map_err(|e| EngineError::ShapeMismatch(e.to_string()))
        })
        .collect()
}

/// Concatenates `[sinks ∥ retrieved ∥ local ∥ current]` for one head.
fn attended_context(
    view: &CacheView,
    retrieved: (DenseMatrix, DenseMatrix),
    current_k: &DenseMatrix,
    current_v: &DenseMatrix,
) -> (DenseMatrix, DenseMatrix, usize) {
    let mut k = view.sink_keys.clone();
    let mut v = view.sink_values.clone();
    k.extend(&retrieved.0).unwrap();
    v.extend(&retrieved.1).unwrap();
    k.extend(&view.local_keys).unwrap();
    v.extend(&view.local_values).unwrap();
    let history = k.rows();
    k.extend(current_k).unwrap();
    v.extend(current_v).unwrap();
    (k, v, history)
}

struct HeadScan {
    view: CacheView,
    probe: Vec<f32>,
    scores: Vec<ScoredChunk>,
}

pub struct Engine {
    config: EngineConfig,
    cache: KvCache,
    stats: Vec<StreamingStats>,
    task: Option<Vec<DenseMatrix>>,
    step: usize,
}

impl Engine {
    pub fn new(config: EngineConfig) -> Result<Self, EngineError> {
        config.validate()?;
        let n = config.layers * config.heads;
        Ok(Self {
            cache: KvCache::new(config.layers, config.heads, config.cache_config()),
            stats: vec![StreamingStats::new(config.head_dim()); n],
            task: None,
            step: 0,
            config,
        })
    }

    /// Task-description queries appended to every pre-filling window before
    /// its probe is built. One matrix per (layer, head).
    pub fn with_task_block(mut self, task: Vec<DenseMatrix>) -> Result<Self, EngineError> {
        let n = self.config.layers * self.config.heads;
        if task.len() != n || task.iter().any(|m| m.cols() != self.config.head_dim()) {
            return Err(EngineError::ShapeMismatch("task block".into()));
        }
        self.task = Some(task);
        Ok(self)
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn cache(&self) -> &KvCache {
        &self.cache
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    fn check_block(&self, block: &WindowBlock, rows: usize) -> Result<(), EngineError> {
        let c = &self.config;
        block
            .check_shape(c.layers, c.heads, rows, c.head_dim())
            .map_err(|e| EngineError::ShapeMismatch(e.to_string()))
    }

    pub fn prefill_step(&mut self, block: &WindowBlock) -> Result<StepRecord, EngineError> {
        let rows = block.rows();
        if rows == 0 {
            return Err(EngineError::ShapeMismatch("empty window".into()));
        }
        self.check_block(block, rows)?;
        let config = self.config;
        let heads = config.heads;
        let task = self.task.as_deref();

        let layers: Vec<LayerRecord> = self
            .cache
            .streams_mut()
            .par_chunks_mut(heads)
            .zip(self.stats.par_chunks_mut(heads))
            .enumerate()
            .map(|(layer, (streams, stats))| {
                let mut scans = Vec::with_capacity(heads);
                for (head, (stream, st)) in streams.iter().zip(stats.iter_mut()).enumerate() {
                    let q = block.q(layer, head);
                    st.update(q)?;
                    let probe_input = match task {
                        Some(t) => {
                            let mut all = q.clone();
                            all.extend(&t[layer * heads + head]).unwrap();
                            all
                        }
                        None => q.clone(),
                    };
                    let probe = window_probe(&probe_input, st, config.probe_mode)?;
                    let view = stream.snapshot();
                    let scores = score_chunks(probe.vector.as_slice(), &view, config.rep_mode);
                    scans.push(HeadScan {
                        view,
                        probe: probe.vector.into_vec(),
                        scores,
                    });
                }
                finish_layer(layer, scans, config.budget, &config, block, streams, true)
            })
            .collect::<Result<_, EngineError>>()?;

        let record = StepRecord {
            step: self.step,
            stage: Stage::PreFilling,
            layers,
        };
        self.step += 1;
        Ok(record)
    }

    pub fn decode_step(&mut self, block: &WindowBlock) -> Result<StepRecord, EngineError> {
        self.check_block(block, 1)?;
        let config = self.config;
        let heads = config.heads;

        // Score every layer before any budget is fixed.
        let scans: Vec<Vec<HeadScan>> = self
            .cache
            .streams_mut()
            .par_chunks_mut(heads)
            .enumerate()
            .map(|(layer, streams)| {
                streams
                    .iter()
                    .enumerate()
                    .map(|(head, stream)| {
                        let probe = decoding_probe(block.q(layer, head).row(0));
                        let view = stream.snapshot();
                        let scores = score_chunks(probe.vector.as_slice(), &view, config.rep_mode);
                        HeadScan {
                            view,
                            probe: probe.vector.into_vec(),
                            scores,
                        }
                    })
                    .collect()
            })
            .collect();

        let budgets = match config.cutoff_mode {
            CutoffMode::Fixed => vec![config.budget; config.layers],
            CutoffMode::Dynamic => {
                let per_layer: Vec<Vec<f64>> = scans
                    .iter()
                    .map(|heads| {
                        let lists: Vec<Vec<ScoredChunk>> =
                            heads.iter().map(|h| h.scores.clone()).collect();
                        aggregate_heads(&lists).map(|s| s.iter().map(|c| c.score).collect())
                    })
                    .collect::<Result<_, _>>()?;
                let profile = DensityProfile::from_scores(&per_layer);
                allocate_in_units(&profile, config.layers * config.budget, config.chunk_size)?
                    .budgets
            }
        };

        let layers: Vec<LayerRecord> = self
            .cache
            .streams_mut()
            .par_chunks_mut(heads)
            .zip(scans.into_par_iter())
            .zip(budgets.into_par_iter())
            .enumerate()
            .map(|(layer, ((streams, scans), budget))| {
                finish_layer(layer, scans, budget, &config, block, streams, false)
            })
            .collect::<Result<_, EngineError>>()?;

        let record = StepRecord {
            step: self.step,
            stage: Stage::Decoding,
            layers,
        };
        self.step += 1;
        Ok(record)
    }
}

/// Selection, attention and cache update for one layer once its heads have
/// been scored.
fn finish_layer(
    layer: usize,
    scans: Vec<HeadScan>,
    budget: usize,
    config: &EngineConfig,
    block: &WindowBlock,
    streams: &mut [LayerCache],
    prefill: bool,
) -> Result<LayerRecord, EngineError> {
    let lists: Vec<Vec<ScoredChunk>> = scans.iter().map(|s| s.scores.clone()).collect();
    let scores = aggregate_heads(&lists)?;
    let raw: Vec<f64> = scores.iter().map(|s| s.score).collect();
    let theta = layer_density(&raw).unwrap_or(0.0);
    let selection = if prefill {
        select_topk(&scores, budget, config.chunk_size)
    } else {
        recall_layer(&scores, budget, config.chunk_size)
    };

    let mut checksum = 0.0f64;
    let mut attended_history = 0;
    let mut probes = Vec::with_capacity(scans.len());
    for (head, (scan, stream)) in scans.into_iter().zip(streams.iter_mut()).enumerate() {
        let retrieved = materialize(&selection, &scan.view)?;
        let (qk, qv) = (block.k(layer, head), block.v(layer, head));
        let (k, v, history) = attended_context(&scan.view, retrieved, qk, qv);
        let out = reference_attention(block.q(layer, head), &k, &v, true)?;
        checksum += out.as_slice().iter().map(|&x| x as f64).sum::<f64>();
        attended_history = attended_history.max(history);
        stream.append(qk, qv)?;
        probes.push(scan.probe);
    }

    Ok(LayerRecord {
        layer,
        probe: probes,
        scores,
        theta,
        budget,
        selected: selection.selected,
        attended_history,
        checksum,
    })
}

/// Runs every pre-filling window then every decode step of `trace`.
pub fn run_trace(trace: &Trace, config: EngineConfig) -> Result<Vec<StepRecord>, EngineError> {
    let h = &trace.header;
    if h.dim != config.dim
        || h.layers != config.layers
        || h.heads != config.heads
        || h.window != config.window
    {
        return Err(EngineError::Config(format!(
            "trace shape d={} L={} H={} m={} does not match engine d={} L={} H={} m={}",
            h.dim,
            h.layers,
            h.heads,
            h.window,
            config.dim,
            config.layers,
            config.heads,
            config.window
        )));
    }
    let mut engine = Engine::new(config)?;
    if let Some(task) = &trace.task {
        engine = engine.with_task_block(task.clone())?;
    }
    let mut records = Vec::with_capacity(trace.windows.len() + trace.decode.len());
    for w in &trace.windows {
        records.push(engine.prefill_step(w)?);
    }
    for d in &trace.decode {
        records.push(engine.decode_step(d)?);
    }
    Ok(records)
}

/// Writes one JSON object per line.
pub fn write_jsonl<W: Write>(records: &[StepRecord], mut out: W) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}
