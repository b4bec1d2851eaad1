//! Retrieval-quality analytics over a stream of step records.
//!
//! Per layer the report summarises the raw chunk scores, the perplexity of
//! each step's score distribution, recall against planted ground truth and
//! the granted budget. Pre-filling and decoding steps are summarised
//! separately and together.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cutoff::CutoffMode;
use crate::engine::{EngineConfig, StepRecord};
use crate::linalg::softmax_entropy;
use crate::probe::{ProbeMode, Stage};
use crate::trace::GroundTruth;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("empty score list")]
    EmptyInput,
    #[error("ground truth is empty for this step")]
    EmptyTruth,
    #[error("reports are not comparable: {0}")]
    ConfigMismatch(String),
}

/// `exp(H(softmax(scores)))`, the effective number of chunks competing.
pub fn score_perplexity(scores: &[f64]) -> Result<f64, MetricsError> {
    let h = softmax_entropy(scores).map_err(|_| MetricsError::EmptyInput)?;
    Ok(h.exp().clamp(1.0, scores.len() as f64))
}

/// Fraction of `truth` found in `selected`.
pub fn recall_at_budget(selected: &[u64], truth: &[u64]) -> Result<f64, MetricsError> {
    if truth.is_empty() {
        return Err(MetricsError::EmptyTruth);
    }
    let hits = truth.iter().filter(|t| selected.contains(t)).count();
    Ok(hits as f64 / truth.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub count: usize,
    pub mean: f64,
    pub min: f64,
    pub p25: f64,
    pub p50: f64,
    pub p75: f64,
    pub max: f64,
}

impl Summary {
    /// Quantiles use linear interpolation between order statistics.
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let q = |p: f64| {
            let pos = p * (v.len() - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = pos.ceil() as usize;
            v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
        };
        Some(Self {
            count: v.len(),
            mean: v.iter().sum::<f64>() / v.len() as f64,
            min: v[0],
            p25: q(0.25),
            p50: q(0.5),
            p75: q(0.75),
            max: v[v.len() - 1],
        })
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct StageSplit {
    pub prefill: Option<Summary>,
    pub decode: Option<Summary>,
    pub all: Option<Summary>,
}

impl StageSplit {
    fn from_tagged(values: &[(Stage, f64)]) -> Self {
        let pick =
            |s: Stage| -> Vec<f64> { values.iter().filter(|v| v.0 == s).map(|v| v.1).collect() };
        let all: Vec<f64> = values.iter().map(|v| v.1).collect();
        Self {
            prefill: Summary::of(&pick(Stage::PreFilling)),
            decode: Summary::of(&pick(Stage::Decoding)),
            all: Summary::of(&all),
        }
    }

    pub fn mean(&self) -> Option<f64> {
        self.all.map(|s| s.mean)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerMetrics {
    pub layer: usize,
    /// Every chunk score observed at this layer.
    pub score: StageSplit,
    /// One value per step with at least one scored chunk.
    pub perplexity: StageSplit,
    /// One value per step whose ground truth for this layer is non-empty.
    pub recall: StageSplit,
    pub budget: StageSplit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BudgetSplit {
    pub sinks: usize,
    pub local: usize,
    pub retrieved: usize,
    pub total: usize,
}

/// Means over layers of the per-layer means.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Overall {
    pub recall: Option<f64>,
    pub perplexity: Option<f64>,
    pub recall_decode: Option<f64>,
    pub perplexity_decode: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub engine_version: String,
    pub probe_mode: ProbeMode,
    pub cutoff_mode: CutoffMode,
    pub config: EngineConfig,
    pub budget_split: BudgetSplit,
    pub trace_hash: Option<String>,
    pub prefill_steps: usize,
    pub decode_steps: usize,
    pub layers: Vec<LayerMetrics>,
    pub overall: Overall,
}

fn mean_of(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

impl AnalysisReport {
    pub fn build(
        records: &[StepRecord],
        config: &EngineConfig,
        truth: Option<&GroundTruth>,
        trace_hash: Option<String>,
    ) -> Result<Self, MetricsError> {
        if let Some(gt) = truth {
            if gt.n_sink != config.n_sink || gt.chunk_size != config.chunk_size {
                return Err(MetricsError::ConfigMismatch(format!(
                    "ground truth assumes {} sinks / chunk {}, engine uses {} / {}",
                    gt.n_sink, gt.chunk_size, config.n_sink, config.chunk_size
                )));
            }
        }
        let layers: Vec<LayerMetrics> = (0..config.layers)
            .into_par_iter()
            .map(|layer| layer_metrics(layer, records, truth))
            .collect();
        let overall = Overall {
            recall: mean_of(layers.iter().map(|l| l.recall.mean())),
            perplexity: mean_of(layers.iter().map(|l| l.perplexity.mean())),
            recall_decode: mean_of(layers.iter().map(|l| l.recall.decode.map(|s| s.mean))),
            perplexity_decode: mean_of(layers.iter().map(|l| l.perplexity.decode.map(|s| s.mean))),
        };
        Ok(Self {
            engine_version: env!("CARGO_PKG_VERSION").to_string(),
            probe_mode: config.probe_mode,
            cutoff_mode: config.cutoff_mode,
            config: *config,
            budget_split: BudgetSplit {
                sinks: config.n_sink,
                local: config.n_local,
                retrieved: config.budget,
                total: config.total_budget(),
            },
            trace_hash,
            prefill_steps: records
                .iter()
                .filter(|r| r.stage == Stage::PreFilling)
                .count(),
            decode_steps: records
                .iter()
                .filter(|r| r.stage == Stage::Decoding)
                .count(),
            layers,
            overall,
        })
    }

    /// Rows of `layer,metric,mean,p25,p50,p75` over all steps.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "layer,metric,mean,p25,p50,p75")?;
        for l in &self.layers {
            for (name, split) in [
                ("score", &l.score),
                ("perplexity", &l.perplexity),
                ("recall", &l.recall),
                ("budget", &l.budget),
            ] {
                if let Some(s) = split.all {
                    writeln!(
                        out,
                        "{},{},{},{},{},{}",
                        l.layer, name, s.mean, s.p25, s.p50, s.p75
                    )?;
                }
            }
        }
        out.flush()
    }
}

fn layer_metrics(
    layer: usize,
    records: &[StepRecord],
    truth: Option<&GroundTruth>,
) -> LayerMetrics {
    let mut scores = Vec::new();
    let mut ppl = Vec::new();
    let mut recall = Vec::new();
    let mut budget = Vec::new();
    for r in records {
        let Some(lr) = r.layers.get(layer) else {
            continue;
        };
        let raw: Vec<f64> = lr.scores.iter().map(|s| s.score).collect();
        scores.extend(raw.iter().map(|&s| (r.stage, s)));
        if let Ok(p) = score_perplexity(&raw) {
            ppl.push((r.stage, p));
        }
        budget.push((r.stage, lr.budget as f64));
        let relevant = truth
            .and_then(|gt| gt.for_step(r.step))
            .and_then(|s| s.layers.get(layer));
        if let Some(Ok(x)) = relevant.map(|t| recall_at_budget(&lr.selected, t)) {
            recall.push((r.stage, x));
        }
    }
    LayerMetrics {
        layer,
        score: StageSplit::from_tagged(&scores),
        perplexity: StageSplit::from_tagged(&ppl),
        recall: StageSplit::from_tagged(&recall),
        budget: StageSplit::from_tagged(&budget),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerDelta {
    pub layer: usize,
    /// Mean over pairs of `a − b`.
    pub recall_delta: Option<f64>,
    pub perplexity_delta: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedStat {
    pub pairs: usize,
    pub mean_delta: f64,
    pub frac_a_ge_b: f64,
    pub frac_a_gt_b: f64,
    pub frac_a_le_b: f64,
    pub frac_a_lt_b: f64,
    /// Two-sided exact sign test, ties dropped.
    pub sign_test_p: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub probe_a: ProbeMode,
    pub cutoff_a: CutoffMode,
    pub probe_b: ProbeMode,
    pub cutoff_b: CutoffMode,
    pub pairs: usize,
    pub layers: Vec<LayerDelta>,
    pub recall: Option<PairedStat>,
    pub perplexity: Option<PairedStat>,
}

fn paired(values: &[(f64, f64)]) -> Option<PairedStat> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let frac =
        |f: fn(f64, f64) -> bool| values.iter().filter(|(a, b)| f(*a, *b)).count() as f64 / n;
    let wins = values.iter().filter(|(a, b)| a > b).count();
    let losses = values.iter().filter(|(a, b)| a < b).count();
    Some(PairedStat {
        pairs: values.len(),
        mean_delta: values.iter().map(|(a, b)| a - b).sum::<f64>() / n,
        frac_a_ge_b: frac(|a, b| a >= b),
        frac_a_gt_b: frac(|a, b| a > b),
        frac_a_le_b: frac(|a, b| a <= b),
        frac_a_lt_b: frac(|a, b| a < b),
        sign_test_p: sign_test(wins, losses),
    })
}

/// Two-sided exact binomial sign test with p = 1/2.
pub fn sign_test(wins: usize, losses: usize) -> f64 {
    let n = wins + losses;
    if n == 0 {
        return 1.0;
    }
    let k = wins.min(losses);
    // ln C(n, i) accumulated incrementally.
    let mut ln_c = 0.0f64;
    let mut tail = 0.0f64;
    let ln_half_n = n as f64 * 0.5f64.ln();
    for i in 0..=k {
        if i > 0 {
            ln_c += ((n - i + 1) as f64).ln() - (i as f64).ln();
        }
        tail += (ln_c + ln_half_n).exp();
    }
    (2.0 * tail).min(1.0)
}

fn comparable(a: &AnalysisReport, b: &AnalysisReport) -> Result<(), MetricsError> {
    let strip = |c: &EngineConfig| EngineConfig {
        probe_mode: ProbeMode::Activation,
        cutoff_mode: CutoffMode::Dynamic,
        ..*c
    };
    if strip(&a.config) != strip(&b.config) {
        return Err(MetricsError::ConfigMismatch(format!(
            "configs differ beyond probe/cutoff mode: {:?} vs {:?}",
            a.config, b.config
        )));
    }
    if a.trace_hash != b.trace_hash {
        return Err(MetricsError::ConfigMismatch(
            "reports come from different traces".into(),
        ));
    }
    Ok(())
}

/// Pairs `a[i]` with `b[i]` (typically one pair per seed) and summarises
/// `a − b`.
pub fn compare_runs(
    a: &[AnalysisReport],
    b: &[AnalysisReport],
) -> Result<Comparison, MetricsError> {
    if a.len() != b.len() || a.is_empty() {
        return Err(MetricsError::ConfigMismatch(format!(
            "need equally many reports on both sides, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    for (x, y) in a.iter().zip(b) {
        comparable(x, y)?;
    }
    let probe_a = a[0].probe_mode;
    let cutoff_a = a[0].cutoff_mode;
    let probe_b = b[0].probe_mode;
    let cutoff_b = b[0].cutoff_mode;
    if a.iter()
        .any(|r| r.probe_mode != probe_a || r.cutoff_mode != cutoff_a)
        || b.iter()
            .any(|r| r.probe_mode != probe_b || r.cutoff_mode != cutoff_b)
    {
        return Err(MetricsError::ConfigMismatch(
            "mixed modes within one side".into(),
        ));
    }

    let layers = (0..a[0].config.layers)
        .map(|layer| {
            let delta = |f: fn(&LayerMetrics) -> Option<f64>| {
                mean_of(a.iter().zip(b).map(|(x, y)| {
                    let (x, y) = (
                        x.layers.get(layer).and_then(f)?,
                        y.layers.get(layer).and_then(f)?,
                    );
                    Some(x - y)
                }))
            };
            LayerDelta {
                layer,
                recall_delta: delta(|l| l.recall.mean()),
                perplexity_delta: delta(|l| l.perplexity.mean()),
            }
        })
        .collect();

    let pairs_of = |f: fn(&Overall) -> Option<f64>| -> Vec<(f64, f64)> {
        a.iter()
            .zip(b)
            .filter_map(|(x, y)| Some((f(&x.overall)?, f(&y.overall)?)))
            .collect()
    };
    Ok(Comparison {
        probe_a,
        cutoff_a,
        probe_b,
        cutoff_b,
        pairs: a.len(),
        layers,
        recall: paired(&pairs_of(|o| o.recall)),
        perplexity: paired(&pairs_of(|o| o.perplexity)),
    })
}
