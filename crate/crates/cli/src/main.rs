use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};
use serde::Serialize;
use sha2::{Digest, Sha256};

use kvprobe::engine::{run_trace, write_jsonl, EngineConfig, EngineError};
use kvprobe::metrics::{compare_runs, AnalysisReport, MetricsError};
use kvprobe::trace::{
    generate_synthetic, plan_random, read_trace, write_trace, SynthConfig, TraceError,
};
use kvprobe::{CutoffMode, ProbeMode, RepMode};

const LOG_ENV: &str = "KVPROBE_LOG";

/// Failure classes with stable exit codes.
#[derive(Debug)]
enum Failure {
    /// Unreadable or malformed input files (2).
    Format(anyhow::Error),
    /// Invalid flags or inconsistent configuration (3).
    Config(anyhow::Error),
    /// Reports or traces that do not match (4).
    Mismatch(anyhow::Error),
    /// Anything else, e.g. failing to write outputs (1).
    Other(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Other(_) => 1,
            Failure::Format(_) => 2,
            Failure::Config(_) => 3,
            Failure::Mismatch(_) => 4,
        }
    }

    fn error(&self) -> &anyhow::Error {
        match self {
            Failure::Format(e) | Failure::Config(e) | Failure::Mismatch(e) | Failure::Other(e) => e,
        }
    }
}

impl From<TraceError> for Failure {
    fn from(e: TraceError) -> Self {
        match e {
            TraceError::SpecOutOfRange(_) => Failure::Config(e.into()),
            _ => Failure::Format(e.into()),
        }
    }
}

impl From<EngineError> for Failure {
    fn from(e: EngineError) -> Self {
        match e {
            EngineError::Config(_) => Failure::Config(e.into()),
            EngineError::ShapeMismatch(_) => Failure::Format(e.into()),
            _ => Failure::Other(e.into()),
        }
    }
}

trait OrOther<T> {
    fn or_other(self, what: impl FnOnce() -> String) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> OrOther<T> for Result<T, E> {
    fn or_other(self, what: impl FnOnce() -> String) -> Result<T, Failure> {
        self.map_err(|e| Failure::Other(e.into().context(what())))
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "kvprobe",
    version,
    about = "Trace-driven KV cache retrieval experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic trace with planted relevant chunks.
    GenTrace(GenTraceArgs),
    /// Run the engine over a trace and write step records and a report.
    Run(RunArgs),
    /// Compare two sets of reports, paired in order.
    Compare(CompareArgs),
}

#[derive(Args, Debug)]
struct GenTraceArgs {
    #[arg(long, default_value_t = 64)]
    dim: usize,
    #[arg(long, default_value_t = 4)]
    layers: usize,
    #[arg(long, default_value_t = 1)]
    heads: usize,
    #[arg(long, default_value_t = 256)]
    window_size: usize,
    #[arg(long, default_value_t = 8)]
    windows: usize,
    #[arg(long, default_value_t = 16)]
    decode_steps: usize,
    /// Chunks planted per step (0 disables ground truth).
    #[arg(long, default_value_t = 4)]
    planted: usize,
    #[arg(long, default_value_t = 0.8)]
    signal: f64,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Cache geometry the planted chunk ids refer to.
    #[arg(long, default_value_t = 64)]
    sinks: usize,
    #[arg(long, default_value_t = 32)]
    chunk: usize,
    #[arg(long, default_value_t = 512)]
    local: usize,
    #[arg(long, default_value_t = 0.1)]
    anchor_fraction: f64,
    #[arg(long, default_value_t = 3.0)]
    anchor_scale: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ProbeArg {
    Act,
    Mean,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum CutoffArg {
    Dynamic,
    Fixed,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum RepArg {
    Mean,
    MaxScore,
}

#[derive(Args, Debug)]
struct RunArgs {
    #[arg(long)]
    trace: PathBuf,
    #[arg(long, value_enum, default_value_t = ProbeArg::Act)]
    probe: ProbeArg,
    #[arg(long, value_enum, default_value_t = CutoffArg::Dynamic)]
    cutoff: CutoffArg,
    /// Retrieved pairs per layer.
    #[arg(long, default_value_t = 1472)]
    budget: usize,
    #[arg(long, default_value_t = 32)]
    chunk: usize,
    #[arg(long, default_value_t = 64)]
    sinks: usize,
    #[arg(long, default_value_t = 512)]
    local: usize,
    #[arg(long, value_enum, default_value_t = RepArg::Mean)]
    rep: RepArg,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Step records, one JSON object per line.
    #[arg(long)]
    records: Option<PathBuf>,
    #[arg(long)]
    report: Option<PathBuf>,
    /// Per-layer summary table.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Run manifest with the trace hash, command line and timing.
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct CompareArgs {
    /// Report(s) for side A; repeat the flag for several seeds.
    #[arg(long, required = true, num_args = 1..)]
    a: Vec<PathBuf>,
    #[arg(long, required = true, num_args = 1..)]
    b: Vec<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Serialize)]
struct RunManifest {
    engine_version: &'static str,
    config: EngineConfig,
    trace: PathBuf,
    trace_sha256: String,
    command_line: Vec<String>,
    outputs: Vec<PathBuf>,
    wall_clock_secs: f64,
}

fn sha256_file(path: &Path) -> Result<String, Failure> {
    let bytes = fs::read(path)
        .with_context(|| format!("reading {}", path.display()))
        .map_err(Failure::Format)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Failure> {
    let mut text = serde_json::to_string_pretty(value).or_other(|| "serialising output".into())?;
    text.push('\n');
    fs::write(path, text).or_other(|| format!("writing {}", path.display()))
}

fn gen_trace(args: GenTraceArgs) -> Result<(), Failure> {
    let cfg = SynthConfig {
        dim: args.dim,
        layers: args.layers,
        heads: args.heads,
        window: args.window_size,
        num_windows: args.windows,
        decode_steps: args.decode_steps,
        n_sink: args.sinks,
        chunk_size: args.chunk,
        n_local: args.local,
        anchor_fraction: args.anchor_fraction,
        anchor_scale: args.anchor_scale,
    };
    if !(0.0..=1.0).contains(&args.signal) {
        return Err(Failure::Config(anyhow::anyhow!(
            "--signal must lie in [0, 1], got {}",
            args.signal
        )));
    }
    let spec = plan_random(&cfg, args.planted, args.signal, args.seed);
    if args.planted > 0 && spec.steps.is_empty() {
        warn!(
            "no step has {} retrievable chunks to plant; ground truth will be empty",
            args.planted
        );
    }
    let trace = generate_synthetic(&cfg, &spec, args.seed)?;
    write_trace(&args.out, &trace)?;
    let h = read_trace(&args.out)?.header;
    println!(
        "wrote {}: d={} L={} H={} m={} windows={} decode_steps={} pairs_per_layer={} planted_steps={}",
        args.out.display(),
        h.dim,
        h.layers,
        h.heads,
        h.window,
        h.num_windows,
        h.num_decode_steps,
        h.num_windows * h.window + h.num_decode_steps,
        spec.steps.len()
    );
    Ok(())
}

fn run(args: RunArgs) -> Result<(), Failure> {
    let started = Instant::now();
    let hash = sha256_file(&args.trace)?;
    let trace = read_trace(&args.trace)?;
    let h = &trace.header;
    let config = EngineConfig {
        dim: h.dim,
        layers: h.layers,
        heads: h.heads,
        window: h.window,
        chunk_size: args.chunk,
        n_sink: args.sinks,
        n_local: args.local,
        budget: args.budget,
        probe_mode: match args.probe {
            ProbeArg::Act => ProbeMode::Activation,
            ProbeArg::Mean => ProbeMode::Mean,
        },
        cutoff_mode: match args.cutoff {
            CutoffArg::Dynamic => CutoffMode::Dynamic,
            CutoffArg::Fixed => CutoffMode::Fixed,
        },
        rep_mode: match args.rep {
            RepArg::Mean => RepMode::Mean,
            RepArg::MaxScore => RepMode::MaxScore,
        },
        seed: args.seed,
    };
    config.validate()?;
    info!("running {} steps with {:?}", h.total_steps(), config);

    let records = run_trace(&trace, config)?;
    let report = AnalysisReport::build(
        &records,
        &config,
        trace.ground_truth.as_ref(),
        Some(hash.clone()),
    )
    .map_err(|e| Failure::Config(e.into()))?;

    let mut outputs = Vec::new();
    if let Some(path) = &args.records {
        let f = fs::File::create(path).or_other(|| format!("creating {}", path.display()))?;
        write_jsonl(&records, BufWriter::new(f))
            .or_other(|| format!("writing {}", path.display()))?;
        outputs.push(path.clone());
    }
    if let Some(path) = &args.report {
        write_json(path, &report)?;
        outputs.push(path.clone());
    }
    if let Some(path) = &args.csv {
        let f = fs::File::create(path).or_other(|| format!("creating {}", path.display()))?;
        report
            .write_csv(BufWriter::new(f))
            .or_other(|| format!("writing {}", path.display()))?;
        outputs.push(path.clone());
    }

    if sha256_file(&args.trace)? != hash {
        return Err(Failure::Mismatch(anyhow::anyhow!(
            "trace {} changed while the run was in progress",
            args.trace.display()
        )));
    }
    if let Some(path) = &args.manifest {
        let manifest = RunManifest {
            engine_version: env!("CARGO_PKG_VERSION"),
            config,
            trace: args.trace.clone(),
            trace_sha256: hash,
            command_line: std::env::args().collect(),
            outputs,
            wall_clock_secs: started.elapsed().as_secs_f64(),
        };
        write_json(path, &manifest)?;
    }

    let fmt = |x: Option<f64>| x.map_or("n/a".to_string(), |v| format!("{v:.4}"));
    println!(
        "probe={} cutoff={} budget={}/{}/{} recall={} perplexity={}",
        config.probe_mode,
        config.cutoff_mode,
        config.n_sink,
        config.n_local,
        config.budget,
        fmt(report.overall.recall),
        fmt(report.overall.perplexity)
    );
    Ok(())
}

fn load_report(path: &Path) -> Result<AnalysisReport, Failure> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))
        .map_err(Failure::Format)?;
    serde_json::from_str(&text)
        .with_context(|| format!("parsing report {}", path.display()))
        .map_err(Failure::Format)
}

fn compare(args: CompareArgs) -> Result<(), Failure> {
    let a = args
        .a
        .iter()
        .map(|p| load_report(p))
        .collect::<Result<Vec<_>, _>>()?;
    let b = args
        .b
        .iter()
        .map(|p| load_report(p))
        .collect::<Result<Vec<_>, _>>()?;
    let cmp = compare_runs(&a, &b).map_err(|e| match e {
        MetricsError::ConfigMismatch(_) => Failure::Mismatch(e.into()),
        _ => Failure::Other(e.into()),
    })?;
    match &args.out {
        Some(path) => write_json(path, &cmp)?,
        None => println!(
            "{}",
            serde_json::to_string_pretty(&cmp).or_other(|| "serialising".into())?
        ),
    }
    if let Some(r) = &cmp.recall {
        info!("recall delta {:.4} over {} pairs", r.mean_delta, r.pairs);
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or(LOG_ENV, "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(3)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::GenTrace(a) => gen_trace(a),
        Command::Run(a) => run(a),
        Command::Compare(a) => compare(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error());
            ExitCode::from(f.code())
        }
    }
}
