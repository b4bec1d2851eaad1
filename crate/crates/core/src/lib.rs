//! Trace-driven KV cache retrieval with activation-aware probe queries and
//! entropy-guided per-layer budgets.
//!
//! The pipeline, per step:
//!
//! 1. [`probe`] summarises the current window's queries into one probe vector,
//!    weighting tokens by how far they deviate from the running statistics.
//! 2. [`retrieval`] scores cached chunks by cosine against the probe and keeps
//!    the best ones under a pair budget.
//! 3. During decoding, [`cutoff`] redistributes the total budget across layers
//!    by the entropy of each layer's score distribution.
//! 4. [`engine`] attends over sinks, retrieved chunks, the local tail and the
//!    current tokens, then appends the new pairs to the [`cache`].
//!
//! [`trace`] defines the on-disk input format and a synthetic generator with
//! planted ground truth; [`metrics`] turns step records into reports.

pub mod cache;
pub mod cutoff;
pub mod engine;
pub mod linalg;
pub mod metrics;
pub mod probe;
pub mod retrieval;
pub mod trace;

pub use cache::{CacheConfig, KvCache, RepMode};
pub use cutoff::CutoffMode;
pub use engine::{run_trace, Engine, EngineConfig, EngineError, StepRecord};
pub use linalg::{DenseMatrix, DenseVector};
pub use metrics::{compare_runs, AnalysisReport, Comparison};
pub use probe::{ProbeMode, Stage};
pub use trace::{generate_synthetic, plan_random, read_trace, write_trace, SynthConfig, Trace};
