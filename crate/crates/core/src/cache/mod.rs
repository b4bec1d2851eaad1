//! Chunked, tiered KV storage for one (layer, head) stream and the grid of
//! streams that makes up a model's cache.
//!
//! Appended pairs are routed to the attention sinks until `n_sink` pairs
//! have been seen, then into an open chunk that seals every `chunk_size`
//! pairs. The most recent `n_local` non-sink pairs are additionally mirrored
//! in a hot local tail. Nothing is ever evicted.

pub mod spill;

use std::collections::VecDeque;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{DenseMatrix, DenseVector};
use spill::{SpillError, SpillWriter};

#[derive(Debug, Error)]
pub enum CacheError {
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("stream ({layer}, {head}) out of range")]
    OutOfRange { layer: usize, head: usize },
    #[error(transparent)]
    Spill(#[from] SpillError),
}

/// How a chunk is summarised for scoring.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RepMode {
    /// Cosine against the per-dimension mean of member keys.
    #[default]
    Mean,
    /// Maximum cosine over member keys.
    MaxScore,
}

impl std::fmt::Display for RepMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            RepMode::Mean => "mean",
            RepMode::MaxScore => "max-score",
        })
    }
}

/// Representative key of a chunk. Both modes store the mean; `MaxScore`
/// is resolved against member keys at scoring time.
pub fn rep_key_of(keys: &DenseMatrix, _mode: RepMode) -> DenseVector {
    keys.column_mean()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheConfig {
    pub n_sink: usize,
    pub chunk_size: usize,
    pub n_local: usize,
    /// Per-head key/value width.
    pub dim: usize,
}

impl Default for CacheConfig {
    fn default() -> Self {
        Self {
            n_sink: 64,
            chunk_size: 32,
            n_local: 512,
            dim: 128,
        }
    }
}

/// Inclusive token position range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSpan {
    pub start: usize,
    pub end: usize,
}

impl TokenSpan {
    pub fn len(&self) -> usize {
        self.end + 1 - self.start
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KvChunk {
    pub chunk_id: u64,
    pub layer: usize,
    pub head: usize,
    pub span: TokenSpan,
    pub keys: DenseMatrix,
    pub values: DenseMatrix,
    pub rep_key: DenseVector,
}

impl KvChunk {
    pub fn len(&self) -> usize {
        self.keys.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.rows() == 0
    }
}

/// Immutable snapshot of one stream. Sealed chunks are shared with the
/// live cache; everything else is copied.
#[derive(Debug, Clone)]
pub struct CacheView {
    pub layer: usize,
    pub head: usize,
    pub chunk_size: usize,
    pub sink_keys: DenseMatrix,
    pub sink_values: DenseMatrix,
    pub chunks: Vec<Arc<KvChunk>>,
    /// The unsealed trailing chunk, if it holds any pairs.
    pub open: Option<Arc<KvChunk>>,
    pub local_keys: DenseMatrix,
    pub local_values: DenseMatrix,
    /// Token position of the first local-tail pair (`total_pairs` when empty).
    pub local_start: usize,
    pub total_pairs: usize,
}

impl CacheView {
    /// Chunks eligible for retrieval: sealed chunks plus the partial
    /// trailing chunk, restricted to those lying entirely before the local
    /// tail so that no pair is attended twice.
    pub fn retrievable(&self) -> impl Iterator<Item = &KvChunk> + '_ {
        let limit = self.local_start;
        self.chunks
            .iter()
            .map(|c| c.as_ref())
            .chain(self.open.as_deref())
            .filter(move |c| c.span.end < limit)
    }

    pub fn retrievable_count(&self) -> usize {
        self.retrievable().count()
    }

    pub fn chunk(&self, id: u64) -> Option<&KvChunk> {
        self.chunks
            .iter()
            .map(|c| c.as_ref())
            .chain(self.open.as_deref())
            .find(|c| c.chunk_id == id)
    }

    pub fn sealed_rows(&self) -> usize {
        self.chunks.iter().map(|c| c.len()).sum()
    }

    pub fn open_rows(&self) -> usize {
        self.open.as_ref().map_or(0, |c| c.len())
    }
}

/// One key/value row held in the local tail.
type LocalPair = (Box<[f32]>, Box<[f32]>);

/// Tiered cache for a single (layer, head) stream. One writer.
pub struct LayerCache {
    layer: usize,
    head: usize,
    config: CacheConfig,
    sink_keys: DenseMatrix,
    sink_values: DenseMatrix,
    chunks: Vec<Arc<KvChunk>>,
    open_keys: DenseMatrix,
    open_values: DenseMatrix,
    open_start: usize,
    local: VecDeque<LocalPair>,
    total: usize,
    next_id: u64,
    spill: Option<SpillWriter>,
}

impl LayerCache {
    pub fn new(layer: usize, head: usize, config: CacheConfig) -> Self {
        Self {
            layer,
            head,
            config,
            sink_keys: DenseMatrix::empty(config.dim),
            sink_values: DenseMatrix::empty(config.dim),
            chunks: Vec::new(),
            open_keys: DenseMatrix::empty(config.dim),
            open_values: DenseMatrix::empty(config.dim),
            open_start: config.n_sink,
            local: VecDeque::with_capacity(config.n_local),
            total: 0,
            next_id: 0,
            spill: None,
        }
    }

    /// Mirrors every sealed chunk into a spill file at `path`.
    pub fn with_spill(mut self, path: &Path) -> Result<Self, CacheError> {
        self.spill = Some(SpillWriter::create(
            path,
            self.config.chunk_size,
            self.config.dim,
        )?);
        Ok(self)
    }

    pub fn config(&self) -> &CacheConfig {
        &self.config
    }

    pub fn total_pairs(&self) -> usize {
        self.total
    }

    pub fn sealed_chunks(&self) -> usize {
        self.chunks.len()
    }

    /// Appends `keys.rows()` pairs and returns how many chunks were sealed.
    pub fn append(
        &mut self,
        keys: &DenseMatrix,
        values: &DenseMatrix,
    ) -> Result<usize, CacheError> {
        let d = self.config.dim;
        if keys.rows() == 0 || keys.rows() != values.rows() {
            return Err(CacheError::DimMismatch(format!(
                "keys have {} rows, values {}; need equal and non-zero",
                keys.rows(),
                values.rows()
            )));
        }
        if keys.cols() != d || values.cols() != d {
            return Err(CacheError::DimMismatch(format!(
                "expected width {d}, got keys {} values {}",
                keys.cols(),
                values.cols()
            )));
        }

        let mut sealed = 0;
        for (k, v) in keys.row_iter().zip(values.row_iter()) {
            if self.sink_keys.rows() < self.config.n_sink {
                self.sink_keys.push_row(k).unwrap();
                self.sink_values.push_row(v).unwrap();
            } else {
                self.open_keys.push_row(k).unwrap();
                self.open_values.push_row(v).unwrap();
                if self.config.n_local > 0 {
                    if self.local.len() == self.config.n_local {
                        self.local.pop_front();
                    }
                    self.local.push_back((k.into(), v.into()));
                }
                if self.open_keys.rows() == self.config.chunk_size {
                    self.seal()?;
                    sealed += 1;
                }
            }
            self.total += 1;
        }
        Ok(sealed)
    }

    fn seal(&mut self) -> Result<(), CacheError> {
        let d = self.config.dim;
        let keys = std::mem::replace(&mut self.open_keys, DenseMatrix::empty(d));
        let values = std::mem::replace(&mut self.open_values, DenseMatrix::empty(d));
        if let Some(w) = self.spill.as_mut() {
            w.write_chunk(&keys, &values)?;
        }
        let chunk = self.make_chunk(self.next_id, keys, values);
        self.open_start = chunk.span.end + 1;
        self.next_id += 1;
        self.chunks.push(Arc::new(chunk));
        Ok(())
    }

    fn make_chunk(&self, chunk_id: u64, keys: DenseMatrix, values: DenseMatrix) -> KvChunk {
        let rep_key = rep_key_of(&keys, RepMode::Mean);
        KvChunk {
            chunk_id,
            layer: self.layer,
            head: self.head,
            span: TokenSpan {
                start: self.open_start,
                end: self.open_start + keys.rows() - 1,
            },
            keys,
            values,
            rep_key,
        }
    }

    pub fn snapshot(&self) -> CacheView {
        let d = self.config.dim;
        let open = (self.open_keys.rows() > 0).then(|| {
            Arc::new(self.make_chunk(
                self.next_id,
                self.open_keys.clone(),
                self.open_values.clone(),
            ))
        });
        let mut local_keys = DenseMatrix::empty(d);
        let mut local_values = DenseMatrix::empty(d);
        for (k, v) in &self.local {
            local_keys.push_row(k).unwrap();
            local_values.push_row(v).unwrap();
        }
        CacheView {
            layer: self.layer,
            head: self.head,
            chunk_size: self.config.chunk_size,
            sink_keys: self.sink_keys.clone(),
            sink_values: self.sink_values.clone(),
            chunks: self.chunks.clone(),
            open,
            local_start: self.total - self.local.len(),
            local_keys,
            local_values,
            total_pairs: self.total,
        }
    }

    pub fn flush_spill(&mut self) -> Result<(), CacheError> {
        if let Some(w) = self.spill.as_mut() {
            w.flush()?;
        }
        Ok(())
    }
}

/// All streams of a model, indexed `(layer, head)`.
pub struct KvCache {
    layers: usize,
    heads: usize,
    streams: Vec<LayerCache>,
}

impl KvCache {
    pub fn new(layers: usize, heads: usize, config: CacheConfig) -> Self {
        let streams = (0..layers)
            .flat_map(|l| (0..heads).map(move |h| (l, h)))
            .map(|(l, h)| LayerCache::new(l, h, config))
            .collect();
        Self {
            layers,
            heads,
            streams,
        }
    }

    /// Like [`new`](Self::new), spilling each stream to
    /// `dir/layer{l}_head{h}.akvc`.
    pub fn with_spill_dir(
        layers: usize,
        heads: usize,
        config: CacheConfig,
        dir: &Path,
    ) -> Result<Self, CacheError> {
        let mut cache = Self::new(layers, heads, config);
        for s in cache.streams.iter_mut() {
            let path = dir.join(format!("layer{}_head{}.akvc", s.layer, s.head));
            let taken = std::mem::replace(s, LayerCache::new(s.layer, s.head, config));
            *s = taken.with_spill(&path)?;
        }
        Ok(cache)
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    fn index(&self, layer: usize, head: usize) -> Result<usize, CacheError> {
        if layer >= self.layers || head >= self.heads {
            return Err(CacheError::OutOfRange { layer, head });
        }
        Ok(layer * self.heads + head)
    }

    pub fn stream(&self, layer: usize, head: usize) -> Result<&LayerCache, CacheError> {
        let i = self.index(layer, head)?;
        Ok(&self.streams[i])
    }

    pub fn stream_mut(&mut self, layer: usize, head: usize) -> Result<&mut LayerCache, CacheError> {
        let i = self.index(layer, head)?;
        Ok(&mut self.streams[i])
    }

    pub fn streams_mut(&mut self) -> &mut [LayerCache] {
        &mut self.streams
    }

    pub fn append(
        &mut self,
        layer: usize,
        head: usize,
        keys: &DenseMatrix,
        values: &DenseMatrix,
    ) -> Result<usize, CacheError> {
        self.stream_mut(layer, head)?.append(keys, values)
    }

    pub fn snapshot(&self, layer: usize, head: usize) -> Result<CacheView, CacheError> {
        Ok(self.stream(layer, head)?.snapshot())
    }

    pub fn flush_spill(&mut self) -> Result<(), CacheError> {
        self.streams.iter_mut().try_for_each(|s| s.flush_spill())
    }
}
