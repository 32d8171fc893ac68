//! `lenbatch` command-line harness: workload generation, predictor
//! training and evaluation, simulation and report tables.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use thiserror::Error;

use lenbatch::metrics::MetricsReport;
use lenbatch::predictor::{EmbeddingProvider, ForestConfig, HttpEmbedder, LocalHasher};
use lenbatch::sim::{run_with, Policy, SimConfig};
use lenbatch::workload::{gen_from_config, load_trace, save_trace, WorkloadConfig};
use lenbatch::{logstore, GenLenPredictor, LlmProfile, PredictorMode, Request};

#[derive(Debug, Error)]
enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

fn config_err(e: impl std::fmt::Display) -> CliError {
    CliError::Config(e.to_string())
}

fn runtime_err(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

#[derive(Parser)]
#[command(name = "lenbatch", version, about = "Generation-length-aware LLM batch serving simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-application trace (JSONL).
    GenWorkload(GenWorkloadArgs),
    /// Replay a trace through one serving policy.
    Simulate(SimulateArgs),
    /// Train a generation-length predictor on a trace.
    TrainPredictor(TrainArgs),
    /// Print the RMSE of a predictor on a trace.
    EvalPredictor(EvalArgs),
    /// Tabulate metrics files as CSV, one row per file.
    Report(ReportArgs),
}

#[derive(Args)]
struct GenWorkloadArgs {
    /// Workload config JSON; defaults to the built-in 8-task corpus.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Overrides the config's arrival rate (requests/s).
    #[arg(long)]
    rate: Option<f64>,
    /// Overrides the config's request count.
    #[arg(long)]
    n: Option<usize>,
}

#[derive(Args)]
struct EmbedArgs {
    /// Base URL of an embedding service; the local hasher is used when absent.
    #[arg(long)]
    embed_url: Option<String>,
    #[arg(long, default_value_t = 2000)]
    embed_timeout_ms: u64,
}

impl EmbedArgs {
    fn provider(&self) -> Box<dyn EmbeddingProvider> {
        match &self.embed_url {
            Some(url) => Box::new(HttpEmbedder::new(url, Duration::from_millis(self.embed_timeout_ms))),
            None => Box::new(LocalHasher),
        }
    }
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    trace: PathBuf,
    /// Simulation config JSON; command-line flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    policy: Option<Policy>,
    #[arg(long)]
    instances: Option<usize>,
    /// LLM profile JSON (memory and cost model).
    #[arg(long)]
    profile: Option<PathBuf>,
    /// Predictor model JSON, required by glp/abp/magnus unless the mode is uilo.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Metrics JSON output.
    #[arg(long)]
    out: PathBuf,
    /// Directory for the run's JSONL log.
    #[arg(long)]
    log_dir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Arrival-rate label for reports; measured from the trace when absent.
    #[arg(long)]
    rate: Option<f64>,
    #[command(flatten)]
    embed: EmbedArgs,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    trace: PathBuf,
    #[arg(long)]
    mode: PredictorMode,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    trees: Option<usize>,
    #[arg(long)]
    max_depth: Option<usize>,
    #[arg(long, default_value_t = 1024)]
    g_max: u32,
    #[command(flatten)]
    embed: EmbedArgs,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    trace: PathBuf,
    #[command(flatten)]
    embed: EmbedArgs,
}

#[derive(Args)]
struct ReportArgs {
    /// Metrics JSON files written by `simulate`.
    #[arg(long, num_args = 1.., required = true)]
    metrics: Vec<PathBuf>,
    /// CSV output.
    #[arg(long)]
    out: PathBuf,
    /// Optional JSON array of the same reports.
    #[arg(long)]
    json: Option<PathBuf>,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| config_err(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(runtime_err)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| runtime_err(format!("{}: {e}", path.display())))
}

fn load_requests(path: &Path) -> Result<Vec<Request>, CliError> {
    let trace = load_trace(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
    Ok(trace.iter().map(|r| r.to_request()).collect())
}

fn gen_workload(a: GenWorkloadArgs) -> Result<(), CliError> {
    let mut cfg: WorkloadConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => WorkloadConfig::default(),
    };
    if let Some(r) = a.rate {
        cfg.rate = r;
    }
    if let Some(n) = a.n {
        cfg.n_requests = n;
    }
    let trace = gen_from_config(&cfg, a.seed).map_err(config_err)?;
    save_trace(&a.out, &trace).map_err(runtime_err)?;
    eprintln!("wrote {} requests to {}", trace.len(), a.out.display());
    Ok(())
}

fn measured_rate(trace: &[Request]) -> Option<f64> {
    let (first, last) = (trace.first()?.arrival_time, trace.last()?.arrival_time);
    (trace.len() > 1 && last > first).then(|| (trace.len() - 1) as f64 / (last - first))
}

fn simulate(a: SimulateArgs) -> Result<(), CliError> {
    let mut cfg: SimConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => SimConfig::default(),
    };
    if let Some(p) = a.policy {
        cfg.policy = p;
    }
    if let Some(k) = a.instances {
        cfg.instances = k;
    }
    if let Some(p) = &a.profile {
        cfg.profile = read_json::<LlmProfile>(p)?;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    cfg.validate().map_err(CliError::Config)?;
    let model = match &a.model {
        Some(p) => Some(GenLenPredictor::load(p).map_err(|e| config_err(format!("{}: {e}", p.display())))?),
        None => None,
    };
    let trace = load_requests(&a.trace)?;
    let provider = a.embed.provider();
    let out = run_with(&trace, &cfg, model.as_ref(), provider.as_ref()).map_err(|e| match e {
        lenbatch::sim::SimError::Config(m) => CliError::Config(m),
        other => runtime_err(other),
    })?;
    let mut report = out.report;
    report.arrival_rate = a.rate.or_else(|| measured_rate(&trace));
    write_json(&a.out, &report)?;
    if let Some(dir) = &a.log_dir {
        fs::create_dir_all(dir).map_err(runtime_err)?;
        let path = dir.join(format!("{}-seed{}.jsonl", cfg.policy, cfg.seed));
        logstore::write_log(&path, &out.log).map_err(runtime_err)?;
    }
    eprintln!(
        "{}: {} served, {} rejected, {:.3} req/s, avg response {:.2} s",
        cfg.policy, report.n_served, report.n_rejected, report.request_throughput, report.avg_response_time_s
    );
    Ok(())
}

fn train_predictor(a: TrainArgs) -> Result<(), CliError> {
    let trace = load_requests(&a.trace)?;
    let mut hp = ForestConfig::default();
    if let Some(t) = a.trees {
        hp.n_trees = t;
    }
    if let Some(d) = a.max_depth {
        hp.max_depth = d;
    }
    let provider = a.embed.provider();
    let model = GenLenPredictor::train_with(&trace, a.mode, hp, a.g_max, a.seed, provider.as_ref()).map_err(config_err)?;
    model.save(&a.out).map_err(runtime_err)?;
    eprintln!("trained {} predictor on {} requests -> {}", a.mode, trace.len(), a.out.display());
    Ok(())
}

#[derive(Serialize)]
struct EvalResult {
    mode: PredictorMode,
    n: usize,
    rmse: f64,
}

fn eval_predictor(a: EvalArgs) -> Result<(), CliError> {
    let model = GenLenPredictor::load(&a.model).map_err(|e| config_err(format!("{}: {e}", a.model.display())))?;
    let trace = load_requests(&a.trace)?;
    if trace.is_empty() {
        return Err(CliError::Config("trace is empty".into()));
    }
    let provider = a.embed.provider();
    let mut sq = 0.0;
    for r in &trace {
        let p = model.predict_with(r, model.mode, provider.as_ref()).map_err(runtime_err)?;
        let e = p as f64 - r.actual_gen_len as f64;
        sq += e * e;
    }
    let res = EvalResult {
        mode: model.mode,
        n: trace.len(),
        rmse: (sq / trace.len() as f64).sqrt(),
    };
    println!("{}", serde_json::to_string(&res).map_err(runtime_err)?);
    Ok(())
}

#[derive(Serialize)]
struct ReportRow<'a> {
    policy: &'a str,
    arrival_rate: Option<f64>,
    seed: u64,
    instances: usize,
    n_requests: usize,
    n_served: usize,
    n_rejected: usize,
    request_throughput: f64,
    token_throughput: f64,
    valid_token_throughput: f64,
    avg_response_time_s: f64,
    p95_response_time_s: f64,
    n_batches: usize,
    mean_batch_size: f64,
    n_oom: usize,
    phi: Option<f64>,
    wait_bounds: Option<&'a str>,
    predictor_mode: Option<&'a str>,
}

impl<'a> From<&'a MetricsReport> for ReportRow<'a> {
    fn from(m: &'a MetricsReport) -> Self {
        Self {
            policy: &m.policy,
            arrival_rate: m.arrival_rate,
            seed: m.seed,
            instances: m.instances,
            n_requests: m.n_requests,
            n_served: m.n_served,
            n_rejected: m.n_rejected,
            request_throughput: m.request_throughput,
            token_throughput: m.token_throughput,
            valid_token_throughput: m.valid_token_throughput,
            avg_response_time_s: m.avg_response_time_s,
            p95_response_time_s: m.p95_response_time_s,
            n_batches: m.n_batches,
            mean_batch_size: m.mean_batch_size,
            n_oom: m.n_oom,
            phi: m.phi,
            wait_bounds: m.wait_bounds.as_deref(),
            predictor_mode: m.predictor_mode.as_deref(),
        }
    }
}

fn report(a: ReportArgs) -> Result<(), CliError> {
    let reports = a
        .metrics
        .iter()
        .map(|p| read_json::<MetricsReport>(p))
        .collect::<Result<Vec<_>, _>>()?;
    let mut w = csv::Writer::from_path(&a.out).map_err(runtime_err)?;
    for m in &reports {
        w.serialize(ReportRow::from(m)).map_err(runtime_err)?;
    }
    w.flush().map_err(runtime_err)?;
    if let Some(p) = &a.json {
        write_json(p, &reports)?;
    }
    Ok(())
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let res = match cli.command {
        Command::GenWorkload(a) => gen_workload(a),
        Command::Simulate(a) => simulate(a),
        Command::TrainPredictor(a) => train_predictor(a),
        Command::EvalPredictor(a) => eval_predictor(a),
        Command::Report(a) => report(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
