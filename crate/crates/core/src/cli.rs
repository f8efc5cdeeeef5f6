//! Command-line front end: `run`, `resume`, `validate`, `record`, `replay`.
//!
//! Exit codes are stable:
//!
//! | code | meaning |
//! |------|---------|
//! | 0 | success (validate: candidate feasible) |
//! | 1 | configuration or usage error, digest mismatch, I/O failure |
//! | 2 | population extinct |
//! | 3 | provider failure aborted the run (checkpoint kept) |
//! | 4 | validate: hard constraint violated |
//! | 5 | validate: candidate could not be parsed |
//!
//! Standard output only ever carries the rendering of the best solution (or
//! the violation list for `validate`); diagnostics go to stderr.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::engine::{Checkpoint, Engine, EngineConfig, EngineError, RunResult, TerminationReason};
use crate::evaluation::{validate, Severity};
use crate::gene::{parse_from_text, Gene};
use crate::provider::live::AuthToken;
use crate::provider::{
    BackendKind, LiveProvider, Provider, ProviderError, RecordingProvider, ReplayProvider, RetryPolicy,
    ScriptedProvider,
};
use crate::tasks::{AnyTask, TaskDef};
use crate::telemetry::{AbortInfo, Level, Logger, ReportContext, RunReport};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_EXTINCT: i32 = 2;
pub const EXIT_PROVIDER: i32 = 3;
pub const EXIT_HARD_VIOLATION: i32 = 4;
pub const EXIT_PARSE_FAILURE: i32 = 5;

pub const DEFAULT_API_KEY_ENV: &str = "HYBRIDEVO_API_KEY";
const DEFAULT_REPORT: &str = "hybridevo-report.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    Live,
    Scripted,
    Replay,
}

fn default_api_key_env() -> String {
    DEFAULT_API_KEY_ENV.to_string()
}

fn default_timeout_ms() -> u64 {
    60_000
}

/// Provider section of a run config. The auth token itself is never stored
/// here, only the name of the variable that holds it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProviderSettings {
    pub backend: Backend,
    #[serde(default)]
    pub endpoint: Option<String>,
    #[serde(default)]
    pub model: Option<String>,
    #[serde(default = "default_api_key_env")]
    pub api_key_env: String,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default)]
    pub retry: RetryPolicy,
    /// Extra scripted rules tried before the task's built-in simulator.
    #[serde(default)]
    pub script: Option<PathBuf>,
}

impl Default for ProviderSettings {
    fn default() -> Self {
        Self {
            backend: Backend::Scripted,
            endpoint: None,
            model: None,
            api_key_env: default_api_key_env(),
            timeout_ms: default_timeout_ms(),
            retry: RetryPolicy::default(),
            script: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputPaths {
    #[serde(default)]
    pub report: Option<PathBuf>,
    #[serde(default)]
    pub log: Option<PathBuf>,
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub cassette: Option<PathBuf>,
}

fn default_log_level() -> Level {
    Level::Info
}

/// On-disk run configuration. Relative paths are resolved against the
/// directory holding the file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfigFile {
    pub task: PathBuf,
    #[serde(default)]
    pub engine: EngineConfig,
    #[serde(default)]
    pub provider: ProviderSettings,
    #[serde(default)]
    pub output: OutputPaths,
    #[serde(default = "default_log_level")]
    pub log_level: Level,
}

#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct CliError(String);

fn cfg_err(m: impl Into<String>) -> CliError {
    CliError(m.into())
}

impl RunConfigFile {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| cfg_err(format!("reading {}: {e}", path.display())))?;
        let mut cfg: RunConfigFile =
            serde_json::from_str(&text).map_err(|e| cfg_err(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_against(base);
        Ok(cfg)
    }

    fn resolve_against(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.task);
        let o = &mut self.output;
        for p in [&mut o.report, &mut o.log, &mut o.checkpoint, &mut o.cassette].into_iter().flatten() {
            fix(p);
        }
        if let Some(p) = self.provider.script.as_mut() {
            fix(p);
        }
    }

    /// Command-line flags win over file values.
    pub fn apply(&mut self, o: &Overrides) {
        if let Some(seed) = o.seed {
            self.engine.seed = seed;
        }
        if let Some(b) = o.backend {
            self.provider.backend = b;
        }
        if let Some(g) = o.generations {
            self.engine.max_generations = g;
        }
        if let Some(n) = o.population {
            self.engine.population_size = n;
        }
        if let Some(c) = o.concurrency {
            self.engine.concurrency = c;
        }
        if let Some(l) = o.log_level {
            self.log_level = l;
        }
        let set = |slot: &mut Option<PathBuf>, v: &Option<PathBuf>| {
            if v.is_some() {
                slot.clone_from(v);
            }
        };
        set(&mut self.output.report, &o.report);
        set(&mut self.output.log, &o.log);
        set(&mut self.output.checkpoint, &o.checkpoint);
        set(&mut self.output.cassette, &o.cassette);
    }

    pub fn report_path(&self) -> PathBuf {
        self.output.report.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_REPORT))
    }

    /// Defaults to a sibling of the report so aborted runs can always resume.
    pub fn checkpoint_path(&self) -> PathBuf {
        self.output.checkpoint.clone().unwrap_or_else(|| self.report_path().with_extension("checkpoint.json"))
    }

    /// Everything that can be checked without touching the network.
    pub fn validate(&self) -> Result<(), CliError> {
        self.engine.validate().map_err(|e| cfg_err(e.to_string()))?;
        let p = &self.provider;
        match p.backend {
            Backend::Live => {
                if p.endpoint.as_deref().unwrap_or("").is_empty() {
                    return Err(cfg_err("live backend needs provider.endpoint"));
                }
                if p.model.as_deref().unwrap_or("").is_empty() {
                    return Err(cfg_err("live backend needs provider.model"));
                }
                if p.api_key_env.is_empty() {
                    return Err(cfg_err("provider.api_key_env must name an environment variable"));
                }
                if p.timeout_ms == 0 {
                    return Err(cfg_err("provider.timeout_ms must be positive"));
                }
                if p.retry.max_attempts == 0 || p.retry.backoff_multiplier < 1.0 {
                    return Err(cfg_err("provider.retry needs max_attempts >= 1 and backoff_multiplier >= 1"));
                }
            }
            Backend::Replay => {
                if self.output.cassette.is_none() {
                    return Err(cfg_err("replay backend needs a cassette path (output.cassette or --cassette)"));
                }
            }
            Backend::Scripted => {}
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub backend: Option<Backend>,
    #[arg(long)]
    pub generations: Option<u32>,
    #[arg(long)]
    pub population: Option<usize>,
    #[arg(long)]
    pub concurrency: Option<usize>,
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, value_parser = parse_level)]
    pub log_level: Option<Level>,
    #[arg(long)]
    pub cassette: Option<PathBuf>,
}

fn parse_level(s: &str) -> Result<Level, String> {
    s.parse::<Level>().map_err(|e| e.to_string())
}

#[derive(Debug, Parser)]
#[command(name = "hybridevo", version, about = "Genetic search with language-model operators")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a search from a config file.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Continue an interrupted run from its checkpoint.
    Resume {
        #[arg(value_name = "CHECKPOINT")]
        from: PathBuf,
        /// Use this config instead of the one stored in the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Check a candidate against a task's constraints.
    Validate { task: PathBuf, candidate: PathBuf },
    /// Run while capturing every provider exchange to a cassette.
    Record {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Run against a recorded cassette only.
    Replay {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Mode {
    Plain,
    Record,
}

/// Parses `args` (including the program name) and runs the command.
pub fn main_with<I, T>(args: I, stdout: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command, stdout) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_CONFIG
        }
    }
}

/// Outcome of [`invoke`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Invocation {
    pub code: i32,
    pub stdout: String,
    pub error: Option<String>,
}

/// Runs one command line in-process, capturing stdout. Errors that the binary
/// would print come back in `error` instead.
pub fn invoke<I, T>(args: I) -> Invocation
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let mut buf = Vec::new();
    let (code, error) = match Cli::try_parse_from(args) {
        Err(e) => (if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK }, Some(e.to_string())),
        Ok(cli) => match dispatch(cli.command, &mut buf) {
            Ok(code) => (code, None),
            Err(e) => (EXIT_CONFIG, Some(e.to_string())),
        },
    };
    Invocation { code, stdout: String::from_utf8_lossy(&buf).into_owned(), error }
}

fn dispatch(command: Command, out: &mut dyn Write) -> Result<i32, CliError> {
    match command {
        Command::Run { config, overrides } => start(&config, &overrides, None, Mode::Plain, out),
        Command::Record { config, overrides } => start(&config, &overrides, None, Mode::Record, out),
        Command::Replay { config, overrides } => {
            let o = Overrides { backend: Some(Backend::Replay), ..overrides };
            start(&config, &o, None, Mode::Plain, out)
        }
        Command::Resume { from, config, overrides } => {
            let cp = Checkpoint::read(&from).map_err(|e| cfg_err(e.to_string()))?;
            let mut cfg = match config {
                Some(path) => RunConfigFile::load(&path)?,
                None => stored_config(&cp)?,
            };
            cfg.apply(&overrides);
            if overrides.checkpoint.is_none() {
                cfg.output.checkpoint = Some(from.clone());
            }
            let mode =
                if cp.meta.get("mode").and_then(|m| m.as_str()) == Some("record") { Mode::Record } else { Mode::Plain };
            execute(cfg, Some(&cp), mode, out)
        }
        Command::Validate { task, candidate } => cmd_validate(&task, &candidate, out),
    }
}

fn start(
    config: &Path,
    overrides: &Overrides,
    cp: Option<&Checkpoint>,
    mode: Mode,
    out: &mut dyn Write,
) -> Result<i32, CliError> {
    let mut cfg = RunConfigFile::load(config)?;
    cfg.apply(overrides);
    execute(cfg, cp, mode, out)
}

fn stored_config(cp: &Checkpoint) -> Result<RunConfigFile, CliError> {
    let value =
        cp.meta.get("run_config").cloned().ok_or_else(|| cfg_err("checkpoint carries no run config; pass --config"))?;
    serde_json::from_value(value).map_err(|e| cfg_err(format!("stored run config: {e}")))
}

fn execute(cfg: RunConfigFile, cp: Option<&Checkpoint>, mode: Mode, out: &mut dyn Write) -> Result<i32, CliError> {
    cfg.validate()?;
    if mode == Mode::Record {
        if cfg.provider.backend == Backend::Replay {
            return Err(cfg_err("record needs a live or scripted backend"));
        }
        if cfg.output.cassette.is_none() {
            return Err(cfg_err("record needs a cassette path (output.cassette or --cassette)"));
        }
    }
    // Fail on a missing token before anything else happens.
    let token = match cfg.provider.backend {
        Backend::Live => Some(AuthToken::from_env(&cfg.provider.api_key_env).map_err(|e| cfg_err(e.to_string()))?),
        _ => None,
    };
    let task = AnyTask::load(&cfg.task).map_err(|e| cfg_err(e.to_string()))?;
    let base = build_provider(&cfg, &task, token).map_err(|e| cfg_err(e.to_string()))?;
    let provider: Box<dyn Provider> = match mode {
        Mode::Record => {
            let path = cfg.output.cassette.as_ref().expect("checked above");
            Box::new(RecordingProvider::open(base, path).map_err(|e| cfg_err(e.to_string()))?)
        }
        Mode::Plain => base,
    };
    let logger = match &cfg.output.log {
        Some(path) => {
            Logger::to_file(cfg.log_level, path, false).map_err(|e| cfg_err(format!("log {}: {e}", path.display())))?
        }
        None => Logger::new(cfg.log_level, None, true),
    };
    let run = Run { cfg: &cfg, provider: provider.as_ref(), logger: &logger, checkpoint: cp, mode };
    match &task {
        AnyTask::Travel(t) => run.go(t, out),
        AnyTask::Proposal(t) => run.go(t, out),
        AnyTask::Synthetic(t) => run.go(t, out),
    }
}

fn build_provider(
    cfg: &RunConfigFile,
    task: &AnyTask,
    token: Option<AuthToken>,
) -> Result<Box<dyn Provider>, ProviderError> {
    let p = &cfg.provider;
    Ok(match p.backend {
        Backend::Scripted => {
            let sim = task.simulator().with_seed(cfg.engine.seed);
            match &p.script {
                Some(path) => Box::new(ScriptedProvider::from_file(path)?.with_seed(cfg.engine.seed).then(sim)),
                None => Box::new(sim),
            }
        }
        Backend::Replay => Box::new(ReplayProvider::open(cfg.output.cassette.as_ref().expect("validated"))?),
        Backend::Live => Box::new(LiveProvider::new(
            p.endpoint.clone().expect("validated"),
            p.model.clone().expect("validated"),
            token.expect("token read before building"),
            Duration::from_millis(p.timeout_ms),
            p.retry,
            cfg.engine.seed,
        )?),
    })
}

struct Run<'a> {
    cfg: &'a RunConfigFile,
    provider: &'a dyn Provider,
    logger: &'a Logger,
    checkpoint: Option<&'a Checkpoint>,
    mode: Mode,
}

impl Run<'_> {
    fn go<G: Gene>(&self, task: &TaskDef<G>, out: &mut dyn Write) -> Result<i32, CliError> {
        let cfg = self.cfg;
        let started_at = chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true);
        let cp_path = cfg.checkpoint_path();
        let meta = json!({
            "run_config": cfg,
            "mode": if self.mode == Mode::Record { "record" } else { "run" },
        });
        let engine = Engine::new(task, cfg.engine.clone(), self.provider)
            .map_err(|e| cfg_err(e.to_string()))?
            .with_logger(self.logger)
            .with_checkpoint(&cp_path)
            .with_meta(meta.clone());
        let ctx = ReportContext {
            task_digest: task.digest(),
            config_digest: engine.config_digest(),
            backend: Some(backend_name(self.provider.backend()).into()),
            started_at: Some(started_at),
            meta,
        };
        let outcome = match self.checkpoint {
            Some(cp) => engine.resume(cp),
            None => engine.run(),
        };
        let report_path = cfg.report_path();
        match outcome {
            Ok(result) => {
                RunReport::from_result(&result, &ctx)
                    .write(&report_path)
                    .map_err(|e| cfg_err(format!("writing report {}: {e}", report_path.display())))?;
                Ok(finish(&result, out))
            }
            Err(EngineError::Provider { error, generation }) => {
                eprintln!("error: provider failed during generation {generation}: {error}");
                match Checkpoint::read(&cp_path) {
                    Ok(cp) => {
                        let abort = AbortInfo {
                            generation,
                            error: error.to_string(),
                            checkpoint: Some(cp_path.display().to_string()),
                        };
                        let report =
                            RunReport::from_checkpoint::<G>(&cp, abort, &ctx).map_err(|e| cfg_err(e.to_string()))?;
                        report.write(&report_path).map_err(|e| cfg_err(format!("writing report: {e}")))?;
                        eprintln!("partial report written; continue with: hybridevo resume {}", cp_path.display());
                    }
                    Err(_) => eprintln!("no generation completed; nothing to resume"),
                }
                Ok(EXIT_PROVIDER)
            }
            Err(e @ EngineError::DigestMismatch { .. }) => Err(cfg_err(e.to_string())),
            Err(e) => Err(cfg_err(e.to_string())),
        }
    }
}

fn backend_name(b: BackendKind) -> &'static str {
    match b {
        BackendKind::Live => "live",
        BackendKind::Scripted => "scripted",
        BackendKind::Replay => "replay",
    }
}

fn finish<G: Gene>(result: &RunResult<G>, out: &mut dyn Write) -> i32 {
    eprintln!(
        "finished: {} after {} generation(s), {} provider call(s)",
        result.termination.as_str(),
        result.history.len(),
        result.calls.total
    );
    if result.termination == TerminationReason::PopulationExtinct {
        return EXIT_EXTINCT;
    }
    if let Some(gene) = result.best.as_ref().and_then(|b| b.gene.as_ref()) {
        let _ = writeln!(out, "{}", gene.render());
    }
    EXIT_OK
}

fn cmd_validate(task_path: &Path, candidate: &Path, out: &mut dyn Write) -> Result<i32, CliError> {
    let task = AnyTask::load(task_path).map_err(|e| cfg_err(e.to_string()))?;
    let text =
        std::fs::read_to_string(candidate).map_err(|e| cfg_err(format!("reading {}: {e}", candidate.display())))?;
    let (value, code) = check_candidate(&task, &text);
    let _ = writeln!(out, "{}", serde_json::to_string_pretty(&value).expect("json"));
    Ok(code)
}

/// Parses and validates a candidate document: the JSON verdict `validate`
/// prints, with its exit code.
pub fn check_candidate(task: &AnyTask, text: &str) -> (serde_json::Value, i32) {
    match task {
        AnyTask::Travel(t) => check(t, text),
        AnyTask::Proposal(t) => check(t, text),
        AnyTask::Synthetic(t) => check(t, text),
    }
}

fn check<G: Gene>(task: &TaskDef<G>, text: &str) -> (serde_json::Value, i32) {
    match parse_from_text::<G>(text) {
        Err(e) => (json!({ "status": "parse_failure", "error": e.to_string() }), EXIT_PARSE_FAILURE),
        Ok(gene) => {
            let violations = validate(&gene, &task.constraints);
            let hard = violations.iter().any(|v| v.severity == Severity::Hard);
            let status = if hard { "infeasible" } else { "feasible" };
            (json!({ "status": status, "violations": violations }), if hard { EXIT_HARD_VIOLATION } else { EXIT_OK })
        }
    }
}
