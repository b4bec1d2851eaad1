//! Trace container: per-window, per-layer, per-head Q/K/V blocks plus an
//! optional task-description query block and planted-relevance ground truth.

mod format;
mod synth;

pub use format::{
    payload_len, read_trace, write_trace, BlockIter, BlockKind, TraceBlock, TraceReader,
    DTYPE_F32LE, TRACE_MAGIC, TRACE_VERSION,
};
pub use synth::{generate_synthetic, plan_random, PlantedSpec, PlantedStep, SynthConfig};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::DenseMatrix;
use crate::probe::Stage;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("trace i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad trace magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported trace version {0}")]
    VersionUnsupported(u32),
    #[error("trace truncated at byte offset {offset}")]
    TruncatedFile { offset: u64 },
    #[error("malformed trace header: {0}")]
    BadHeader(String),
    #[error("malformed ground truth: {0}")]
    BadGroundTruth(String),
    #[error("planted spec out of range: {0}")]
    SpecOutOfRange(String),
    #[error("block shape mismatch: {0}")]
    Shape(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub magic: String,
    pub version: u32,
    /// Model width; each head carries `dim / heads` columns.
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    /// Pre-filling window size `m`.
    pub window: usize,
    pub num_windows: usize,
    pub num_decode_steps: usize,
    pub dtype: String,
    pub has_task_block: bool,
    /// Rows per head in the task block (0 when absent).
    pub task_rows: usize,
    pub has_ground_truth: bool,
    /// Length of the trailing ground-truth JSON document.
    pub ground_truth_bytes: u64,
}

impl TraceHeader {
    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn total_steps(&self) -> usize {
        self.num_windows + self.num_decode_steps
    }

    pub fn validate(&self) -> Result<(), TraceError> {
        if self.magic != "AKVT" {
            return Err(TraceError::BadHeader(format!(
                "magic field {:?}",
                self.magic
            )));
        }
        if self.version != TRACE_VERSION {
            return Err(TraceError::VersionUnsupported(self.version));
        }
        if self.dtype != DTYPE_F32LE {
            return Err(TraceError::BadHeader(format!("dtype {:?}", self.dtype)));
        }
        if self.dim == 0 || self.layers == 0 || self.heads == 0 || self.window == 0 {
            return Err(TraceError::BadHeader("dimensions must be positive".into()));
        }
        if !self.dim.is_multiple_of(self.heads) {
            return Err(TraceError::BadHeader(format!(
                "dim {} not divisible by heads {}",
                self.dim, self.heads
            )));
        }
        if self.has_task_block != (self.task_rows > 0) {
            return Err(TraceError::BadHeader(
                "task block flag disagrees with task_rows".into(),
            ));
        }
        if !self.has_ground_truth && self.ground_truth_bytes != 0 {
            return Err(TraceError::BadHeader(
                "ground truth length without flag".into(),
            ));
        }
        Ok(())
    }
}

/// Q/K/V for every (layer, head) of one step, indexed `layer * heads + head`.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowBlock {
    pub layers: usize,
    pub heads: usize,
    pub q: Vec<DenseMatrix>,
    pub k: Vec<DenseMatrix>,
    pub v: Vec<DenseMatrix>,
}

impl WindowBlock {
    pub fn rows(&self) -> usize {
        self.q.first().map_or(0, |m| m.rows())
    }

    pub fn q(&self, layer: usize, head: usize) -> &DenseMatrix {
        &self.q[layer * self.heads + head]
    }

    pub fn k(&self, layer: usize, head: usize) -> &DenseMatrix {
        &self.k[layer * self.heads + head]
    }

    pub fn v(&self, layer: usize, head: usize) -> &DenseMatrix {
        &self.v[layer * self.heads + head]
    }

    /// Checks every tensor is `rows × head_dim`.
    pub fn check_shape(
        &self,
        layers: usize,
        heads: usize,
        rows: usize,
        head_dim: usize,
    ) -> Result<(), TraceError> {
        let n = layers * heads;
        if self.layers != layers
            || self.heads != heads
            || self.q.len() != n
            || self.k.len() != n
            || self.v.len() != n
        {
            return Err(TraceError::Shape(format!(
                "expected {layers} layers x {heads} heads, got {} x {}",
                self.layers, self.heads
            )));
        }
        for m in self.q.iter().chain(&self.k).chain(&self.v) {
            if m.rows() != rows || m.cols() != head_dim {
                return Err(TraceError::Shape(format!(
                    "expected {rows}x{head_dim}, got {}x{}",
                    m.rows(),
                    m.cols()
                )));
            }
        }
        Ok(())
    }
}

/// Relevant chunks for one step, per layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthStep {
    /// Global step index: pre-filling windows first, then decode steps.
    pub step: usize,
    pub stage: Stage,
    pub signal: f64,
    pub layers: Vec<Vec<u64>>,
}

/// Planted ground truth and the cache geometry its chunk ids assume.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub n_sink: usize,
    pub chunk_size: usize,
    pub n_local: usize,
    pub steps: Vec<GroundTruthStep>,
}

impl GroundTruth {
    pub fn for_step(&self, step: usize) -> Option<&GroundTruthStep> {
        self.steps.iter().find(|s| s.step == step)
    }

    /// Every referenced chunk must lie entirely within the tokens seen
    /// before its step.
    pub fn validate(&self, header: &TraceHeader) -> Result<(), TraceError> {
        if self.chunk_size == 0 {
            return Err(TraceError::BadGroundTruth("chunk_size is zero".into()));
        }
        for s in &self.steps {
            if s.step >= header.total_steps() {
                return Err(TraceError::BadGroundTruth(format!(
                    "step {} out of range",
                    s.step
                )));
            }
            if s.layers.len() != header.layers {
                return Err(TraceError::BadGroundTruth(format!(
                    "step {} lists {} layers, header has {}",
                    s.step,
                    s.layers.len(),
                    header.layers
                )));
            }
            let seen = tokens_before_step(header.window, header.num_windows, s.step);
            for &id in s.layers.iter().flatten() {
                let end = self.n_sink + (id as usize + 1) * self.chunk_size;
                if end > seen {
                    return Err(TraceError::BadGroundTruth(format!(
                        "chunk {id} at step {} ends at {end}, only {seen} tokens cached",
                        s.step
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Number of tokens in the cache when step `step` begins.
pub fn tokens_before_step(window: usize, num_windows: usize, step: usize) -> usize {
    if step <= num_windows {
        step * window
    } else {
        num_windows * window + (step - num_windows)
    }
}

/// A fully loaded trace.
#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub header: TraceHeader,
    /// Task-description queries per (layer, head), if present.
    pub task: Option<Vec<DenseMatrix>>,
    pub windows: Vec<WindowBlock>,
    pub decode: Vec<WindowBlock>,
    pub ground_truth: Option<GroundTruth>,
}

impl Trace {
    /// Builds a consistent header for the given content.
    #[allow(clippy::too_many_arguments)]
    pub fn header_for(
        dim: usize,
        layers: usize,
        heads: usize,
        window: usize,
        num_windows: usize,
        num_decode_steps: usize,
        task_rows: usize,
        has_ground_truth: bool,
    ) -> TraceHeader {
        TraceHeader {
            magic: "AKVT".into(),
            version: TRACE_VERSION,
            dim,
            layers,
            heads,
            window,
            num_windows,
            num_decode_steps,
            dtype: DTYPE_F32LE.into(),
            has_task_block: task_rows > 0,
            task_rows,
            has_ground_truth,
            ground_truth_bytes: 0,
        }
    }
}
