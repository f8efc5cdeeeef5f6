//! Leveled JSON-lines event log and run reports.

mod report;

pub use report::{
    masked, write_run_report, AbortInfo, BestSolution, Execution, ReportContext, ReportHeader, ReportStatus, RunReport,
    REPORT_VERSION,
};

use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::Path;
use std::str::FromStr;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

/// Longest solution snippet written to the log.
pub const SNIPPET_CHARS: usize = 500;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Error,
    Warn,
    Info,
    Debug,
    Trace,
}

impl Level {
    pub fn as_str(self) -> &'static str {
        match self {
            Level::Error => "error",
            Level::Warn => "warn",
            Level::Info => "info",
            Level::Debug => "debug",
            Level::Trace => "trace",
        }
    }
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Level {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "error" => Ok(Level::Error),
            "warn" | "warning" => Ok(Level::Warn),
            "info" => Ok(Level::Info),
            "debug" => Ok(Level::Debug),
            "trace" => Ok(Level::Trace),
            other => Err(format!("unknown log level `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EventKind {
    RunStart,
    GenerationStart,
    GenerationEnd,
    EvaluationDone,
    OffspringCreated,
    ConstraintViolation,
    ParseFailure,
    ProviderCall,
    Checkpoint,
    Termination,
}

impl EventKind {
    /// Payload keys every event of this kind carries.
    pub fn required_keys(self) -> &'static [&'static str] {
        match self {
            EventKind::RunStart => &["seed", "population_size", "max_generations"],
            EventKind::GenerationStart => &["population_size"],
            EventKind::GenerationEnd => &["best", "mean", "worst", "hard_violations", "parse_failures"],
            EventKind::EvaluationDone => &["validity", "fitness", "calls"],
            EventKind::OffspringCreated => &["operator", "parents"],
            EventKind::ConstraintViolation => &["constraint_id", "severity", "message"],
            EventKind::ParseFailure => &["purpose", "reason"],
            EventKind::ProviderCall => &["purpose", "latency_ms", "attempts"],
            EventKind::Checkpoint => &["path"],
            EventKind::Termination => &["reason", "total_calls"],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEvent {
    pub timestamp: String,
    pub level: Level,
    pub kind: EventKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub generation: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub individual: Option<u64>,
    pub payload: Map<String, Value>,
}

impl LogEvent {
    pub fn new(level: Level, kind: EventKind) -> Self {
        Self {
            timestamp: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true),
            level,
            kind,
            generation: None,
            individual: None,
            payload: Map::new(),
        }
    }

    pub fn generation(mut self, g: u32) -> Self {
        self.generation = Some(g);
        self
    }

    pub fn individual(mut self, id: u64) -> Self {
        self.individual = Some(id);
        self
    }

    pub fn with(mut self, key: &str, value: impl Into<Value>) -> Self {
        self.payload.insert(key.to_string(), value.into());
        self
    }

    pub fn missing_keys(&self) -> Vec<&'static str> {
        self.kind.required_keys().iter().copied().filter(|k| !self.payload.contains_key(*k)).collect()
    }
}

/// Cuts `text` to at most [`SNIPPET_CHARS`] characters.
pub fn snippet(text: &str) -> String {
    match text.char_indices().nth(SNIPPET_CHARS) {
        Some((cut, _)) => format!("{}…", &text[..cut]),
        None => text.to_string(),
    }
}

struct Sinks {
    file: Option<File>,
    file_failed: bool,
    console: bool,
    memory: Option<Arc<Mutex<Vec<LogEvent>>>>,
}

/// Thread-safe logger; one lock serializes all writes so lines never
/// interleave.
pub struct Logger {
    level: Level,
    sinks: Mutex<Sinks>,
}

impl fmt::Debug for Logger {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Logger").field("level", &self.level).finish()
    }
}

impl Logger {
    /// Drops everything.
    pub fn disabled() -> Self {
        Self::new(Level::Error, None, false)
    }

    pub fn new(level: Level, file: Option<File>, console: bool) -> Self {
        Self { level, sinks: Mutex::new(Sinks { file, file_failed: false, console, memory: None }) }
    }

    pub fn to_file(level: Level, path: &Path, console: bool) -> std::io::Result<Self> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self::new(level, Some(file), console))
    }

    /// Logger that keeps events in memory; returns the shared buffer.
    pub fn in_memory(level: Level) -> (Self, Arc<Mutex<Vec<LogEvent>>>) {
        let buffer = Arc::new(Mutex::new(Vec::new()));
        let logger = Self::new(level, None, false);
        logger.sinks.lock().expect("logger lock").memory = Some(buffer.clone());
        (logger, buffer)
    }

    pub fn level(&self) -> Level {
        self.level
    }

    pub fn enabled(&self, level: Level) -> bool {
        level <= self.level
    }

    /// Writes the event if its level passes. A failing file sink is reported
    /// once on stderr and then skipped.
    pub fn emit(&self, event: LogEvent) {
        if !self.enabled(event.level) {
            return;
        }
        let line = serde_json::to_string(&event).expect("log events serialize");
        let mut sinks = self.sinks.lock().unwrap_or_else(|p| p.into_inner());
        if !sinks.file_failed {
            if let Some(file) = sinks.file.as_mut() {
                if let Err(e) = writeln!(file, "{line}") {
                    sinks.file_failed = true;
                    eprintln!("warning: log file write failed ({e}); continuing without it");
                }
            }
        }
        if sinks.console {
            eprintln!("{line}");
        }
        if let Some(memory) = &sinks.memory {
            memory.lock().unwrap_or_else(|p| p.into_inner()).push(event);
        }
    }
}
