//! Synthetic traces with planted relevance.
//!
//! Background Q/K/V entries are i.i.d. standard normal. For every planted
//! step and layer a unit direction `u` is drawn per head; the keys of each
//! target chunk become `s·u + (1 − s)·noise`, and the step's queries carry
//! `u`: a pre-filling window gets a small set of anchor tokens equal to
//! `anchor_scale · sqrt(d_head) · u` (about `anchor_scale` times a
//! background query's norm), a decode step's single query is that same
//! vector.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{tokens_before_step, GroundTruth, GroundTruthStep, Trace, TraceError, WindowBlock};
use crate::linalg::DenseMatrix;
use crate::probe::Stage;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub window: usize,
    pub num_windows: usize,
    pub decode_steps: usize,
    /// Cache geometry the planted chunk ids refer to.
    pub n_sink: usize,
    pub chunk_size: usize,
    pub n_local: usize,
    pub anchor_fraction: f64,
    pub anchor_scale: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            layers: 4,
            heads: 1,
            window: 256,
            num_windows: 8,
            decode_steps: 16,
            n_sink: 64,
            chunk_size: 32,
            n_local: 512,
            anchor_fraction: 0.1,
            anchor_scale: 3.0,
        }
    }
}

impl SynthConfig {
    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn total_steps(&self) -> usize {
        self.num_windows + self.decode_steps
    }

    fn stage_of(&self, step: usize) -> Stage {
        if step < self.num_windows {
            Stage::PreFilling
        } else {
            Stage::Decoding
        }
    }

    /// Anchor tokens per planted window.
    pub fn anchors_per_window(&self) -> usize {
        ((self.anchor_fraction * self.window as f64).round() as usize).clamp(1, self.window)
    }

    /// Chunk ids whose full span is cached and outside the local tail when
    /// `step` begins.
    pub fn retrievable_chunks(&self, step: usize) -> std::ops::Range<u64> {
        let total = tokens_before_step(self.window, self.num_windows, step);
        let tail = total.saturating_sub(self.n_sink).min(self.n_local);
        let local_start = total - tail;
        let n = local_start.saturating_sub(self.n_sink) / self.chunk_size.max(1);
        0..n as u64
    }

    fn validate(&self) -> Result<(), TraceError> {
        let bad = |m: &str| Err(TraceError::SpecOutOfRange(m.to_string()));
        if self.dim == 0
            || self.layers == 0
            || self.heads == 0
            || self.window == 0
            || self.chunk_size == 0
        {
            return bad("dimensions must be positive");
        }
        if !self.dim.is_multiple_of(self.heads) {
            return bad("dim must be divisible by heads");
        }
        if !(0.0..=1.0).contains(&self.anchor_fraction) {
            return bad("anchor fraction must lie in [0, 1]");
        }
        if !(self.anchor_scale.is_finite() && self.anchor_scale >= 0.0) {
            return bad("anchor scale must be finite and non-negative");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedStep {
    /// Global step index (pre-filling windows, then decode steps).
    pub step: usize,
    /// Chunk ids made relevant in every layer.
    pub targets: Vec<u64>,
    pub signal: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PlantedSpec {
    pub steps: Vec<PlantedStep>,
}

/// Plants `per_step` fresh chunks at every step that still has enough
/// unplanted retrievable chunks. A chunk is planted at most once.
pub fn plan_random(cfg: &SynthConfig, per_step: usize, signal: f64, seed: u64) -> PlantedSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut used = std::collections::BTreeSet::new();
    let mut spec = PlantedSpec::default();
    if per_step == 0 {
        return spec;
    }
    for step in 0..cfg.total_steps() {
        let pool: Vec<u64> = cfg
            .retrievable_chunks(step)
            .filter(|id| !used.contains(id))
            .collect();
        if pool.len() < per_step {
            continue;
        }
        let mut targets: Vec<u64> = sample(&mut rng, pool.len(), per_step)
            .into_iter()
            .map(|i| pool[i])
            .collect();
        targets.sort_unstable();
        used.extend(targets.iter().copied());
        spec.steps.push(PlantedStep {
            step,
            targets,
            signal,
        });
    }
    spec
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DenseMatrix {
    let data = (0..rows * cols)
        .map(|_| rng.sample::<f32, _>(StandardNormal))
        .collect();
    DenseMatrix::from_vec(rows, cols, data).expect("sized")
}

fn unit_vector(rng: &mut ChaCha8Rng, d: usize) -> Vec<f32> {
    loop {
        let v: Vec<f64> = (0..d)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            return v.into_iter().map(|x| (x / n) as f32).collect();
        }
    }
}

/// Generates a trace; output is a pure function of the arguments.
pub fn generate_synthetic(
    cfg: &SynthConfig,
    planted: &PlantedSpec,
    seed: u64,
) -> Result<Trace, TraceError> {
    cfg.validate()?;
    let (l, h, d, m) = (cfg.layers, cfg.heads, cfg.head_dim(), cfg.window);

    let mut seen = std::collections::BTreeSet::new();
    let mut steps_seen = std::collections::BTreeSet::new();
    for p in &planted.steps {
        if p.step >= cfg.total_steps() {
            return Err(TraceError::SpecOutOfRange(format!(
                "step {} beyond trace",
                p.step
            )));
        }
        if !steps_seen.insert(p.step) {
            return Err(TraceError::SpecOutOfRange(format!(
                "step {} planted twice",
                p.step
            )));
        }
        if !(0.0..=1.0).contains(&p.signal) {
            return Err(TraceError::SpecOutOfRange(format!(
                "signal {} outside [0, 1]",
                p.signal
            )));
        }
        if p.targets.is_empty() {
            return Err(TraceError::SpecOutOfRange(format!(
                "step {} has no targets",
                p.step
            )));
        }
        let range = cfg.retrievable_chunks(p.step);
        for &id in &p.targets {
            if !range.contains(&id) {
                return Err(TraceError::SpecOutOfRange(format!(
                    "chunk {id} is not retrievable at step {}",
                    p.step
                )));
            }
            if !seen.insert(id) {
                return Err(TraceError::SpecOutOfRange(format!(
                    "chunk {id} planted twice"
                )));
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let block = |rows: usize, rng: &mut ChaCha8Rng| {
        let mut b = WindowBlock {
            layers: l,
            heads: h,
            q: Vec::with_capacity(l * h),
            k: Vec::with_capacity(l * h),
            v: Vec::with_capacity(l * h),
        };
        for _ in 0..l * h {
            b.q.push(gaussian(rng, rows, d));
            b.k.push(gaussian(rng, rows, d));
            b.v.push(gaussian(rng, rows, d));
        }
        b
    };
    let mut windows: Vec<WindowBlock> = (0..cfg.num_windows).map(|_| block(m, &mut rng)).collect();
    let mut decode: Vec<WindowBlock> = (0..cfg.decode_steps).map(|_| block(1, &mut rng)).collect();

    let anchor_norm = (cfg.anchor_scale * (d as f64).sqrt()) as f32;
    let mut gt_steps = Vec::with_capacity(planted.steps.len());
    for p in &planted.steps {
        let s = p.signal as f32;
        let anchors = (p.step < cfg.num_windows).then(|| {
            let mut idx: Vec<usize> = sample(&mut rng, m, cfg.anchors_per_window()).into_vec();
            idx.sort_unstable();
            idx
        });
        for layer in 0..l {
            for head in 0..h {
                let stream = layer * h + head;
                let u = unit_vector(&mut rng, d);
                for &id in &p.targets {
                    let start = cfg.n_sink + id as usize * cfg.chunk_size;
                    for pos in start..start + cfg.chunk_size {
                        let (w, r) = (pos / m, pos % m);
                        let row = windows[w].k[stream].row_mut(r);
                        for (x, &ui) in row.iter_mut().zip(&u) {
                            let noise: f32 = rng.sample(StandardNormal);
                            *x = s * ui + (1.0 - s) * noise;
                        }
                    }
                }
                let anchor: Vec<f32> = u.iter().map(|x| x * anchor_norm).collect();
                match &anchors {
                    Some(idx) => {
                        for &r in idx {
                            windows[p.step].q[stream]
                                .row_mut(r)
                                .copy_from_slice(&anchor);
                        }
                    }
                    None => {
                        decode[p.step - cfg.num_windows].q[stream]
                            .row_mut(0)
                            .copy_from_slice(&anchor);
                    }
                }
            }
        }
        gt_steps.push(GroundTruthStep {
            step: p.step,
            stage: cfg.stage_of(p.step),
            signal: p.signal,
            layers: vec![p.targets.clone(); l],
        });
    }
    gt_steps.sort_by_key(|s| s.step);

    let mut header =
        Trace::header_for(cfg.dim, l, h, m, cfg.num_windows, cfg.decode_steps, 0, true);
    header.has_ground_truth = true;
    Ok(Trace {
        header,
        task: None,
        windows,
        decode,
        ground_truth: Some(GroundTruth {
            n_sink: cfg.n_sink,
            chunk_size: cfg.chunk_size,
            n_local: cfg.n_local,
            steps: gt_steps,
        }),
    })
}
