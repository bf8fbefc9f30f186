use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use promptor::backend::BackendError;
use promptor::deviation::{write_reports_csv, SimulationConfig};
use promptor::orchestrator::{run_pipeline, Module, Orchestrator, OrchestratorError, PipelineConfig, StabilityMetric};
use promptor::prompt::ModularPrompt;
use promptor::report::{compute_run_metrics, correlate, ReportError};
use promptor::trace::{replay, ExecutionTrace, TraceError, TraceHeader, TraceSink};

const AFTER_HELP: &str = "\
Exit codes:
  0   success
  1   other runtime failure (for example an output file cannot be written)
  2   configuration error (unreadable, unparseable or invalid config or prompt file)
  3   backend error
  4   malformed trace
  64  usage error (unknown subcommand or invalid flags)

Environment:
  PROMPTOR_API_KEY   bearer token sent to HTTP backends
  RUST_LOG           log filter, e.g. RUST_LOG=warn";

const EXIT_OTHER: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_BACKEND: u8 = 3;
const EXIT_TRACE: u8 = 4;
const EXIT_USAGE: u8 = 64;

#[derive(Parser)]
#[command(name = "promptor", version, about = "Stability-gated multi-agent prompt orchestration", after_help = AFTER_HELP)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the pipeline for a task config; writes the trace and prints the report.
    Run(RunArgs),
    /// Score one prompt file with the configured backends.
    EvalStability(EvalArgs),
    /// Monte-Carlo check of the deviation bound; writes CSV.
    SimulateBound(SimulateArgs),
    /// Rebuild plan and prompt state from a trace and re-emit its report.
    Replay(ReplayArgs),
    /// Render the report for one or more traces.
    Report(ReportArgs),
    /// Pearson r between per-prompt stability and first-attempt success.
    Correlate(ReportArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum ModuleArg {
    SubtaskOptimizer,
    Reviewer,
    PlanUpdater,
}

#[derive(Clone, Copy, ValueEnum)]
enum MetricArg {
    Semantic,
    Kl,
}

#[derive(Args)]
struct Overrides {
    /// Run seed (overrides the config).
    #[arg(long)]
    seed: Option<u64>,
    /// Disable a module; may be repeated.
    #[arg(long, value_enum)]
    disable: Vec<ModuleArg>,
    /// Stability metric used by the gate.
    #[arg(long, value_enum)]
    metric: Option<MetricArg>,
    /// Stability threshold in (0, 1].
    #[arg(long)]
    tau: Option<f64>,
    /// Samples per stability evaluation.
    #[arg(long)]
    samples: Option<u32>,
}

#[derive(Args)]
struct RunArgs {
    /// Pipeline config (JSON).
    #[arg(long)]
    config: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
    /// Where to write the trace.
    #[arg(long, default_value = "trace.jsonl")]
    trace: PathBuf,
    /// Where to write the report (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Emit the report as JSON.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Pipeline config providing backends and refinement settings.
    #[arg(long)]
    config: PathBuf,
    /// Modular prompt (JSON).
    #[arg(long)]
    prompt: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
    /// Optional trace of the samples and score.
    #[arg(long)]
    trace: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    /// Simulation config (JSON: models, u, v, epsilons, trials, seed).
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    trials: Option<u64>,
    /// CSV destination (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReplayArgs {
    #[arg(long)]
    trace: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct ReportArgs {
    /// Trace file or directory of `.jsonl` traces; may be repeated.
    #[arg(long, required = true)]
    trace: Vec<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    json: bool,
}

#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn new(code: u8, message: impl Into<String>) -> Self {
        Failure { code, message: message.into() }
    }

    fn config(message: impl Into<String>) -> Self {
        Self::new(EXIT_CONFIG, message)
    }
}

impl From<OrchestratorError> for Failure {
    fn from(e: OrchestratorError) -> Self {
        let code = match &e {
            OrchestratorError::Config(_) | OrchestratorError::Backend(BackendError::Config(_)) => EXIT_CONFIG,
            OrchestratorError::Backend(_) => EXIT_BACKEND,
            _ => EXIT_OTHER,
        };
        Failure::new(code, e.to_string())
    }
}

impl From<BackendError> for Failure {
    fn from(e: BackendError) -> Self {
        OrchestratorError::Backend(e).into()
    }
}

impl From<TraceError> for Failure {
    fn from(e: TraceError) -> Self {
        Failure::new(EXIT_TRACE, e.to_string())
    }
}

impl From<ReportError> for Failure {
    fn from(e: ReportError) -> Self {
        let code = match e {
            ReportError::Metric(_) => EXIT_OTHER,
            _ => EXIT_TRACE,
        };
        Failure::new(code, e.to_string())
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("error")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(EXIT_USAGE),
            };
        }
    };
    let result = match cli.command {
        Command::Run(a) => cmd_run(a),
        Command::EvalStability(a) => cmd_eval(a),
        Command::SimulateBound(a) => cmd_simulate(a),
        Command::Replay(a) => cmd_replay(a),
        Command::Report(a) => cmd_report(a),
        Command::Correlate(a) => cmd_correlate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn load_config(path: &Path, o: &Overrides) -> Result<PipelineConfig, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::config(format!("{}: {e}", path.display())))?;
    let mut cfg: PipelineConfig =
        serde_json::from_str(&text).map_err(|e| Failure::config(format!("{}: {e}", path.display())))?;
    if let Some(seed) = o.seed {
        cfg.seed = seed;
    }
    for m in &o.disable {
        cfg.toggles.disable(match m {
            ModuleArg::SubtaskOptimizer => Module::SubtaskOptimizer,
            ModuleArg::Reviewer => Module::Reviewer,
            ModuleArg::PlanUpdater => Module::PlanUpdater,
        });
    }
    if let Some(m) = o.metric {
        cfg.toggles.metric = match m {
            MetricArg::Semantic => StabilityMetric::Semantic,
            MetricArg::Kl => StabilityMetric::Kl,
        };
    }
    if let Some(tau) = o.tau {
        cfg.refinement.tau = tau;
    }
    if let Some(n) = o.samples {
        cfg.refinement.sample_count = n;
    }
    cfg.validate().map_err(|e| Failure::config(format!("{}: {e}", path.display())))?;
    Ok(cfg)
}

fn emit(out: Option<&Path>, text: &str) -> Result<(), Failure> {
    match out {
        Some(path) => fs::write(path, text).map_err(|e| Failure::new(EXIT_OTHER, format!("{}: {e}", path.display()))),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout
                .write_all(text.as_bytes())
                .and_then(|_| stdout.flush())
                .map_err(|e| Failure::new(EXIT_OTHER, e.to_string()))
        }
    }
}

fn render(traces: &[ExecutionTrace], json: bool) -> Result<String, Failure> {
    let report = compute_run_metrics(traces)?;
    Ok(if json { report.to_json() + "\n" } else { report.render_text() })
}

fn cmd_run(a: RunArgs) -> Result<(), Failure> {
    let cfg = load_config(&a.config, &a.overrides)?;
    let run = run_pipeline(&cfg)?;
    run.trace.write(&a.trace).map_err(|e| Failure::new(EXIT_OTHER, format!("{}: {e}", a.trace.display())))?;
    emit(a.out.as_deref(), &render(std::slice::from_ref(&run.trace), a.json)?)
}

fn cmd_eval(a: EvalArgs) -> Result<(), Failure> {
    let cfg = load_config(&a.config, &a.overrides)?;
    let text = fs::read_to_string(&a.prompt).map_err(|e| Failure::config(format!("{}: {e}", a.prompt.display())))?;
    let prompt: ModularPrompt =
        serde_json::from_str(&text).map_err(|e| Failure::config(format!("{}: {e}", a.prompt.display())))?;
    let generator = cfg.generator.build_generator(cfg.script.clone(), cfg.seed)?;
    let embedder = cfg.embedder.build_embedder()?;
    let sink = TraceSink::new();
    let (score, samples) = Orchestrator::new(&cfg, generator.as_ref(), embedder.as_ref(), &sink)
        .evaluate_prompt_stability(None, &prompt)?;
    if let Some(path) = &a.trace {
        let trace = sink.into_trace(TraceHeader::new(&cfg));
        trace.write(path).map_err(|e| Failure::new(EXIT_OTHER, format!("{}: {e}", path.display())))?;
    }
    let body = serde_json::json!({
        "prompt_fingerprint": prompt.fingerprint(),
        "tau": cfg.refinement.tau,
        "stable": score.value >= cfg.refinement.tau,
        "score": score,
        "samples": samples,
    });
    emit(a.out.as_deref(), &(serde_json::to_string_pretty(&body).expect("json") + "\n"))
}

fn cmd_simulate(a: SimulateArgs) -> Result<(), Failure> {
    let text = fs::read_to_string(&a.config).map_err(|e| Failure::config(format!("{}: {e}", a.config.display())))?;
    let mut sim: SimulationConfig =
        serde_json::from_str(&text).map_err(|e| Failure::config(format!("{}: {e}", a.config.display())))?;
    if let Some(seed) = a.seed {
        sim.seed = seed;
    }
    if let Some(trials) = a.trials {
        sim.trials = trials;
    }
    let reports = sim.run().map_err(|e| Failure::config(e.to_string()))?;
    let mut csv = Vec::new();
    write_reports_csv(&reports, &mut csv).map_err(|e| Failure::new(EXIT_OTHER, e.to_string()))?;
    emit(a.out.as_deref(), &String::from_utf8(csv).expect("csv is utf-8"))
}

fn cmd_replay(a: ReplayArgs) -> Result<(), Failure> {
    let trace = ExecutionTrace::read(&a.trace)?;
    replay(&trace)?;
    emit(a.out.as_deref(), &render(std::slice::from_ref(&trace), a.json)?)
}

/// Expands directories into their `.jsonl` files, sorted by name.
fn trace_paths(inputs: &[PathBuf]) -> Result<Vec<PathBuf>, Failure> {
    let mut out = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut files: Vec<PathBuf> = fs::read_dir(p)
                .map_err(|e| Failure::new(EXIT_TRACE, format!("{}: {e}", p.display())))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.extension().is_some_and(|x| x == "jsonl"))
                .collect();
            files.sort();
            out.extend(files);
        } else {
            out.push(p.clone());
        }
    }
    Ok(out)
}

fn read_traces(inputs: &[PathBuf]) -> Result<Vec<ExecutionTrace>, Failure> {
    trace_paths(inputs)?
        .iter()
        .map(|p| ExecutionTrace::read(p).map_err(|e| Failure::new(EXIT_TRACE, format!("{}: {e}", p.display()))))
        .collect()
}

fn cmd_report(a: ReportArgs) -> Result<(), Failure> {
    let traces = read_traces(&a.trace)?;
    emit(a.out.as_deref(), &render(&traces, a.json)?)
}

fn cmd_correlate(a: ReportArgs) -> Result<(), Failure> {
    let traces = read_traces(&a.trace)?;
    let report = correlate(&traces)?;
    let text = if a.json { serde_json::to_string_pretty(&report).expect("json") + "\n" } else { report.render_text() };
    emit(a.out.as_deref(), &text)
}
