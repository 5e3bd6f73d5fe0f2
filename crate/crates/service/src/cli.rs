//! The `foldedit` command line.

use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use clap::{Parser, Subcommand, ValueEnum};
use foldedit_core::engine::{build_batch, Filter, LayoutError, SessionSpec};
use foldedit_core::eval::{
    drift_report, evaluate_batch, mean_series, EvalError, EvalOptions, GmsFallback, HttpPerceptual, PerceptualProvider,
    SessionReport, Summary, TurnScore, REPORT_SCHEMA_VERSION,
};
use foldedit_core::par::{self, Exec};
use foldedit_core::pipeline::{run_session, InstructionSource, PipelineError, RunOptions, RunReport};
use foldedit_core::planner::{SymbolicPerception, TurnStatus};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::api::{self, AppState};
use crate::config::{ConfigError, EditArgs, EditSettings, FileConfig};
use crate::registry::{Registry, RegistryError};

/// Process exit statuses, one per failure class.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum Exit {
    Ok = 0,
    Usage = 2,
    Config = 3,
    Input = 4,
    Incomplete = 5,
    Unavailable = 6,
    Io = 7,
    Server = 8,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    Incomplete(String),
    #[error("{0}")]
    Unavailable(String),
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("server: {0}")]
    Server(String),
}

impl CliError {
    pub fn exit(&self) -> Exit {
        match self {
            CliError::Usage(_) => Exit::Usage,
            CliError::Config(_) => Exit::Config,
            CliError::Input(_) => Exit::Input,
            CliError::Incomplete(_) => Exit::Incomplete,
            CliError::Unavailable(_) => Exit::Unavailable,
            CliError::Io { .. } => Exit::Io,
            CliError::Server(_) => Exit::Server,
        }
    }
}

fn io_err(path: &Path, e: impl ToString) -> CliError {
    CliError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

impl From<LayoutError> for CliError {
    fn from(e: LayoutError) -> CliError {
        CliError::Input(format!("layout error: {e}"))
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> CliError {
        match e {
            EvalError::ProviderUnavailable(m) => CliError::Unavailable(format!("perceptual provider unavailable: {m}")),
            EvalError::Layout(e) => e.into(),
            other => CliError::Input(other.to_string()),
        }
    }
}

const ENV_HELP: &str = "\
Every flag can also be set through the environment variable shown next to it.
Settings are layered: built-in defaults < --config file < environment < flags.
Secrets are read from the environment only:
  FOLDEDIT_BACKEND_TOKEN  bearer token for the remote backend
  FOLDEDIT_LLM_TOKEN      bearer token for the llm planner endpoint

Exit status: 0 ok, 2 usage, 3 config, 4 input or layout, 5 incomplete run,
6 provider unavailable, 7 i/o, 8 server.";

#[derive(Parser, Debug)]
#[command(name = "foldedit", version, about = "Multi-turn layered image editing: benchmarks, batch runs, evaluation and the session service", after_help = ENV_HELP)]
pub struct Cli {
    /// TOML config file with [edit] and [serve] tables
    #[arg(long, global = true, env = "FOLDEDIT_CONFIG")]
    pub config: Option<PathBuf>,
    /// Disable data parallelism
    #[arg(long, global = true, env = "FOLDEDIT_SEQUENTIAL")]
    pub sequential: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate benchmark sessions
    Genbench(GenbenchArgs),
    /// Drive every benchmark session through the editing loop
    Run(RunArgs),
    /// Score editor outputs against a benchmark
    Eval(EvalArgs),
    /// Summarize evaluation reports, optionally as per-turn drift series
    Report(ReportArgs),
    /// Start the HTTP session service
    Serve(ServeArgs),
}

#[derive(clap::Args, Debug)]
pub struct GenbenchArgs {
    /// Seed range, `A..B` (end exclusive) or `A..=B`
    #[arg(long, env = "FOLDEDIT_SEEDS", value_parser = parse_seeds)]
    pub seeds: Range<u64>,
    #[arg(long, env = "FOLDEDIT_BENCH_OUT")]
    pub out: PathBuf,
    #[arg(long, env = "FOLDEDIT_TURNS", default_value_t = 3)]
    pub turns: u32,
    #[arg(long, env = "FOLDEDIT_CANVAS_WIDTH", default_value_t = 384)]
    pub width: u32,
    #[arg(long, env = "FOLDEDIT_CANVAS_HEIGHT", default_value_t = 256)]
    pub height: u32,
    /// Probability that a turn mixes several commands
    #[arg(long, env = "FOLDEDIT_MIX", default_value_t = 0.3)]
    pub mix: f64,
    /// Keep only sessions whose first scene has at least this many objects
    #[arg(long, env = "FOLDEDIT_MIN_OBJECTS", default_value_t = 0)]
    pub min_objects: usize,
    /// Keep only sessions using at least this many command kinds
    #[arg(long, env = "FOLDEDIT_MIN_KINDS", default_value_t = 0)]
    pub min_kinds: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceArg {
    /// Paraphrase plus the canonical program
    #[default]
    Dsl,
    /// Paraphrase only
    Text,
}

#[derive(clap::Args, Debug)]
pub struct RunArgs {
    #[arg(long, env = "FOLDEDIT_BENCH")]
    pub bench: PathBuf,
    #[arg(long, env = "FOLDEDIT_RUN_OUT")]
    pub out: PathBuf,
    /// What the planner sees each turn
    #[arg(long, env = "FOLDEDIT_SOURCE", value_enum, default_value_t = SourceArg::Dsl)]
    pub source: SourceArg,
    #[command(flatten)]
    pub edit: EditArgs,
}

#[derive(clap::Args, Debug)]
pub struct EvalArgs {
    #[arg(long, env = "FOLDEDIT_BENCH")]
    pub bench: PathBuf,
    #[arg(long, env = "FOLDEDIT_OUTPUTS")]
    pub outputs: PathBuf,
    /// JSON report path; a text table is written next to it with `.txt`
    #[arg(long, env = "FOLDEDIT_REPORT")]
    pub report: PathBuf,
    /// `fallback`, `off`, or the URL of a perceptual-distance service
    #[arg(long, env = "FOLDEDIT_PERCEPTUAL", default_value = "fallback")]
    pub perceptual: String,
    #[arg(long, env = "FOLDEDIT_PERCEPTUAL_TIMEOUT_MS", default_value_t = 30_000)]
    pub perceptual_timeout_ms: u64,
    /// System label recorded in the report; defaults to the outputs directory name
    #[arg(long, env = "FOLDEDIT_SYSTEM")]
    pub system: Option<String>,
}

#[derive(clap::Args, Debug)]
pub struct ReportArgs {
    /// Evaluation report JSON files
    #[arg(long, num_args = 1.., required = true, env = "FOLDEDIT_REPORT_INPUTS", value_delimiter = ',')]
    pub inputs: Vec<PathBuf>,
    /// Per-turn drift series and slopes
    #[arg(long, env = "FOLDEDIT_DRIFT")]
    pub drift: bool,
    /// Also write the drift series as CSV
    #[arg(long, env = "FOLDEDIT_DRIFT_CSV")]
    pub csv: Option<PathBuf>,
    /// Also write the drift report as JSON
    #[arg(long, env = "FOLDEDIT_DRIFT_JSON")]
    pub json: Option<PathBuf>,
}

#[derive(clap::Args, Debug)]
pub struct ServeArgs {
    /// Listen address, HOST:PORT
    #[arg(long, env = "FOLDEDIT_ADDR")]
    pub addr: Option<String>,
    /// Store directory
    #[arg(long, env = "FOLDEDIT_STORE")]
    pub store: Option<PathBuf>,
    /// Server-side limit per turn request
    #[arg(long, env = "FOLDEDIT_TURN_TIMEOUT_SECS")]
    pub turn_timeout_secs: Option<u64>,
    #[command(flatten)]
    pub edit: EditArgs,
}

pub fn parse_seeds(s: &str) -> Result<Range<u64>, String> {
    let bad = || format!("expected A..B or A..=B, got `{s}`");
    let (a, b, inclusive) = if let Some((a, b)) = s.split_once("..=") {
        (a, b, true)
    } else if let Some((a, b)) = s.split_once("..") {
        (a, b, false)
    } else {
        return Err(bad());
    };
    let a: u64 = a.trim().parse().map_err(|_| bad())?;
    let mut b: u64 = b.trim().parse().map_err(|_| bad())?;
    if inclusive {
        b = b.checked_add(1).ok_or_else(bad)?;
    }
    if b <= a {
        return Err(format!("seed range `{s}` is empty"));
    }
    Ok(a..b)
}

/// Subdirectories holding a `manifest.json`, sorted by name.
pub fn session_dirs(bench: &Path) -> Result<Vec<PathBuf>, CliError> {
    let rd = fs::read_dir(bench).map_err(|e| CliError::Input(format!("layout error: {}: {e}", bench.display())))?;
    let mut out: Vec<PathBuf> = rd
        .filter_map(|d| d.ok().map(|d| d.path()))
        .filter(|p| p.join("manifest.json").is_file())
        .collect();
    out.sort();
    if out.is_empty() {
        return Err(CliError::Input(format!(
            "layout error: no sessions under {}",
            bench.display()
        )));
    }
    Ok(out)
}

fn name_of(p: &Path) -> String {
    p.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(d) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(d).map_err(|e| io_err(d, e))?;
    }
    fs::write(path, bytes).map_err(|e| io_err(path, e))
}

fn settings(config: Option<&Path>, edit: &EditArgs) -> Result<(FileConfig, EditSettings), CliError> {
    let file = FileConfig::load(config)?;
    let s = edit.apply(file.edit.clone());
    s.validate()?;
    Ok((file, s))
}

pub fn genbench(a: &GenbenchArgs, exec: Exec) -> Result<Vec<PathBuf>, CliError> {
    let base = SessionSpec {
        n_turns: a.turns,
        canvas: (a.width, a.height),
        intent_mix_prob: a.mix,
        ..SessionSpec::default()
    };
    let mut probe = base.clone();
    probe.seed = a.seeds.start;
    probe.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let seeds: Vec<u64> = a.seeds.clone().collect();
    let filter = Filter {
        min_objects: a.min_objects,
        min_kinds: a.min_kinds,
    };
    build_batch(&a.out, &base, &seeds, filter, exec).map_err(|e| match e {
        LayoutError::Io { path, source } => io_err(&path, source),
        other => CliError::Input(other.to_string()),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionRun {
    pub session: String,
    pub complete: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report: Option<RunReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub settings: EditSettings,
    pub source: SourceArg,
    pub sessions: Vec<SessionRun>,
    pub all_committed: bool,
}

pub fn run(a: &RunArgs, settings: &EditSettings, exec: Exec) -> Result<RunSummary, CliError> {
    let dirs = session_dirs(&a.bench)?;
    let built = settings.build()?;
    let mut cfg = built.cfg;
    // sessions already run in parallel
    cfg.exec.exec = Exec::Sequential;
    let opts = RunOptions {
        backend: built.backend,
        perception: Arc::new(SymbolicPerception { exec: Exec::Sequential }),
        planner: built.planner,
        cfg,
        source: match a.source {
            SourceArg::Dsl => InstructionSource::Dsl,
            SourceArg::Text => InstructionSource::Text,
        },
    };
    let results = par::map(exec, &dirs, |dir| {
        let name = name_of(dir);
        (name.clone(), run_session(dir, &a.out.join(&name), &opts, None))
    });
    let mut sessions = Vec::with_capacity(results.len());
    for (session, r) in results {
        sessions.push(match r {
            Ok(rep) => SessionRun {
                session,
                complete: rep.turns.iter().all(|t| t.status == TurnStatus::Committed),
                report: Some(rep),
                error: None,
            },
            Err(PipelineError::Layout(e)) => return Err(CliError::Input(format!("layout error in {session}: {e}"))),
            Err(PipelineError::Io { path, source }) => return Err(io_err(&path, source)),
            Err(e) => SessionRun {
                session,
                complete: false,
                report: None,
                error: Some(e.to_string()),
            },
        });
    }
    let summary = RunSummary {
        settings: settings.clone(),
        source: a.source,
        all_committed: sessions.iter().all(|s| s.complete),
        sessions,
    };
    let json = serde_json::to_string_pretty(&summary).expect("summary serializes") + "\n";
    write_file(&a.out.join("run_summary.json"), json.as_bytes())?;
    Ok(summary)
}

/// The evaluator output for one benchmark and one system.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub schema_version: u32,
    pub system: String,
    pub perceptual_provider: Option<String>,
    pub sessions: Vec<SessionReport>,
    /// Means over every turn of every session.
    pub summary: Summary,
}

impl BenchReport {
    pub fn to_text(&self) -> String {
        let mut s = format!("system {}\n", self.system);
        for r in &self.sessions {
            s.push('\n');
            s.push_str(&r.to_text());
        }
        let m = &self.summary;
        let opt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"));
        s.push_str(&format!(
            "\noverall  IF {:.4}  IC {:.4}  PSNR_OM {:.3}  SSIM_OM {}  perceptual {}  coverage {:.4}\n",
            m.if_score,
            m.ic_score,
            m.psnr_om,
            opt(m.ssim_om),
            opt(m.perceptual_om),
            m.mask_coverage
        ));
        s
    }
}

pub fn eval(a: &EvalArgs, exec: Exec) -> Result<BenchReport, CliError> {
    let dirs = session_dirs(&a.bench)?;
    let mut pairs = Vec::with_capacity(dirs.len());
    for d in &dirs {
        let o = a.outputs.join(name_of(d));
        if !o.is_dir() {
            return Err(CliError::Input(format!(
                "layout error: no outputs for session {} under {}",
                name_of(d),
                a.outputs.display()
            )));
        }
        pairs.push((d.clone(), o));
    }
    let http;
    let perceptual: Option<&dyn PerceptualProvider> = match a.perceptual.as_str() {
        "off" => None,
        "fallback" => Some(&GmsFallback),
        url if url.starts_with("http://") || url.starts_with("https://") => {
            http = HttpPerceptual::new(url, a.perceptual_timeout_ms);
            Some(&http)
        }
        other => {
            return Err(CliError::Usage(format!(
                "--perceptual: expected fallback, off or a URL, got `{other}`"
            )))
        }
    };
    let perception = SymbolicPerception { exec: Exec::Sequential };
    let opts = EvalOptions {
        perception: &perception,
        perceptual,
        exec,
    };
    let sessions = evaluate_batch(&pairs, &opts)
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;
    let all: Vec<TurnScore> = sessions.iter().flat_map(|s| s.turns.iter().cloned()).collect();
    let report = BenchReport {
        schema_version: REPORT_SCHEMA_VERSION,
        system: a.system.clone().unwrap_or_else(|| name_of(&a.outputs)),
        perceptual_provider: perceptual.map(|p| p.name().to_string()),
        summary: Summary::of(&all),
        sessions,
    };
    let json = serde_json::to_string_pretty(&report).expect("report serializes") + "\n";
    write_file(&a.report, json.as_bytes())?;
    write_file(&a.report.with_extension("txt"), report.to_text().as_bytes())?;
    Ok(report)
}

pub fn report(a: &ReportArgs) -> Result<String, CliError> {
    let mut systems: Vec<(String, Vec<SessionReport>)> = Vec::new();
    for p in &a.inputs {
        let text = fs::read_to_string(p).map_err(|e| CliError::Input(format!("{}: {e}", p.display())))?;
        let r: BenchReport =
            serde_json::from_str(&text).map_err(|e| CliError::Input(format!("{}: {e}", p.display())))?;
        match systems.iter_mut().find(|(s, _)| *s == r.system) {
            Some((_, v)) => v.extend(r.sessions),
            None => systems.push((r.system, r.sessions)),
        }
    }
    if !a.drift {
        let mut s = String::new();
        for (name, sessions) in &systems {
            let all: Vec<TurnScore> = sessions.iter().flat_map(|r| r.turns.iter().cloned()).collect();
            let m = Summary::of(&all);
            s.push_str(&format!(
                "{name}: {} sessions, IF {:.4}, IC {:.4}, PSNR_OM {:.3}\n",
                sessions.len(),
                m.if_score,
                m.ic_score,
                m.psnr_om
            ));
        }
        return Ok(s);
    }
    let series: Vec<_> = systems.iter().map(|(n, r)| mean_series(n, r)).collect();
    let drift = drift_report(&series);
    if let Some(p) = &a.csv {
        write_file(p, drift.to_csv().as_bytes())?;
    }
    if let Some(p) = &a.json {
        write_file(p, drift.to_json().as_bytes())?;
    }
    Ok(drift.to_text())
}

pub fn serve(a: &ServeArgs, file: &FileConfig, settings: EditSettings) -> Result<(), CliError> {
    let addr = a.addr.clone().unwrap_or_else(|| file.serve.addr.clone());
    let store = a.store.clone().unwrap_or_else(|| file.serve.store.clone());
    let timeout = Duration::from_secs(a.turn_timeout_secs.unwrap_or(file.serve.turn_timeout_secs));
    let registry = Registry::open(&store, settings).map_err(|e| match e {
        RegistryError::Validation(v) => CliError::Config(ConfigError::Invalid(v)),
        RegistryError::Io { path, message } => CliError::Io { path, message },
        other => CliError::Server(format!("store {}: {other}", store.display())),
    })?;
    let state = AppState {
        registry: Arc::new(registry),
        turn_timeout: timeout,
    };
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| CliError::Server(e.to_string()))?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&addr)
            .await
            .map_err(|e| CliError::Server(format!("bind {addr}: {e}")))?;
        eprintln!(
            "listening on http://{}",
            listener.local_addr().map_err(|e| CliError::Server(e.to_string()))?
        );
        api::serve(listener, state, async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(|e| CliError::Server(e.to_string()))
    })
}

pub fn dispatch(cli: &Cli) -> Result<(), CliError> {
    let exec = if cli.sequential {
        Exec::Sequential
    } else {
        Exec::default()
    };
    match &cli.command {
        Command::Genbench(a) => {
            let dirs = genbench(a, exec)?;
            println!("wrote {} sessions to {}", dirs.len(), a.out.display());
            Ok(())
        }
        Command::Run(a) => {
            let (_, s) = settings(cli.config.as_deref(), &a.edit)?;
            let sum = run(a, &s, exec)?;
            let done = sum.sessions.iter().filter(|s| s.complete).count();
            println!("{done}/{} sessions committed every turn", sum.sessions.len());
            if sum.all_committed {
                Ok(())
            } else {
                Err(CliError::Incomplete(format!(
                    "{} sessions incomplete; see {}",
                    sum.sessions.len() - done,
                    a.out.join("run_summary.json").display()
                )))
            }
        }
        Command::Eval(a) => {
            let r = eval(a, exec)?;
            print!("{}", r.to_text());
            Ok(())
        }
        Command::Report(a) => {
            print!("{}", report(a)?);
            Ok(())
        }
        Command::Serve(a) => {
            let (file, s) = settings(cli.config.as_deref(), &a.edit)?;
            serve(a, &file, s)
        }
    }
}

/// Parses `args`, runs, and maps failures to exit statuses.
pub fn main_with<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() {
                Exit::Usage as u8
            } else {
                Exit::Ok as u8
            });
        }
    };
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit() as u8)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_ranges() {
        assert_eq!(parse_seeds("0..50").unwrap(), 0..50);
        assert_eq!(parse_seeds("3..=5").unwrap(), 3..6);
        for bad in ["5..5", "7", "a..b", "9..2"] {
            assert!(parse_seeds(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }

    #[test]
    fn env_fills_unset_flags() {
        // clap reads the variable only when the flag is absent
        let cli =
            Cli::try_parse_from(["foldedit", "run", "--bench", "b", "--out", "o", "--retry-budget", "4"]).unwrap();
        let Command::Run(a) = cli.command else { panic!() };
        assert_eq!(a.edit.retry_budget, Some(4));
        assert_eq!(a.source, SourceArg::Dsl);
    }
}
