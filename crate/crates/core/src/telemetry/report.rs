//! JSON run reports.
//!
//! A report plus the task manifest is enough to rebuild the best solution:
//! its canonical text is stored verbatim. Only the `header` block and the
//! per-generation `wall_clock_ms` values vary between identical runs.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::engine::{
    CallCounts, Checkpoint, EngineConfig, EngineError, GenerationRecord, IndividualRecord, RunResult, TerminationReason,
};
use crate::evaluation::FitnessReport;
use crate::gene::{to_text, Gene, Individual, IndividualId, Lineage, Validity};
use crate::provider::Usage;

pub const REPORT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportHeader {
    pub written_at: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub started_at: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportStatus {
    Completed,
    /// The run stopped early; it can be continued from `abort.checkpoint`.
    Partial,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbortInfo {
    /// Generation that was being built when the run stopped.
    pub generation: u32,
    pub error: String,
    pub checkpoint: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestSolution {
    pub id: IndividualId,
    pub validity: Validity,
    /// Canonical gene text; parses back to the exact gene.
    pub gene_text: String,
    pub render: String,
    pub report: Option<FitnessReport>,
    pub lineage: Lineage,
}

impl BestSolution {
    pub fn of<G: Gene>(ind: &Individual<G>) -> Option<Self> {
        let gene = ind.gene.as_ref()?;
        Some(Self {
            id: ind.id,
            validity: ind.validity,
            gene_text: to_text(gene),
            render: gene.render(),
            report: ind.report.clone(),
            lineage: ind.lineage.clone(),
        })
    }
}

/// Settings that affect speed but never results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Execution {
    pub concurrency: usize,
    pub backend: Option<String>,
}

/// Facts about the run the engine result does not carry.
#[derive(Debug, Clone, Default)]
pub struct ReportContext {
    pub task_digest: String,
    pub config_digest: String,
    pub backend: Option<String>,
    pub started_at: Option<String>,
    /// Free-form caller data echoed as `meta` (e.g. the effective CLI config).
    pub meta: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub header: ReportHeader,
    pub version: u32,
    pub kind: String,
    pub task_digest: String,
    pub config_digest: String,
    /// Effective engine configuration, minus `concurrency`.
    pub config: Value,
    pub seed: u64,
    pub status: ReportStatus,
    pub termination: Option<TerminationReason>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub abort: Option<AbortInfo>,
    pub resumed_at: Vec<u32>,
    pub generations: Vec<GenerationRecord>,
    pub best: Option<BestSolution>,
    pub calls: CallCounts,
    pub usage: Usage,
    pub final_population: Vec<IndividualRecord>,
    pub execution: Execution,
    #[serde(default)]
    pub meta: Value,
}

fn config_echo(config: &EngineConfig) -> Value {
    let mut v = serde_json::to_value(config).expect("config serializes");
    v.as_object_mut().expect("config is an object").remove("concurrency");
    v
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

impl RunReport {
    pub fn from_result<G: Gene>(result: &RunResult<G>, ctx: &ReportContext) -> Self {
        Self {
            header: ReportHeader { written_at: now(), started_at: ctx.started_at.clone() },
            version: REPORT_VERSION,
            kind: G::KIND.to_string(),
            task_digest: ctx.task_digest.clone(),
            config_digest: ctx.config_digest.clone(),
            config: config_echo(&result.config),
            seed: result.seed,
            status: ReportStatus::Completed,
            termination: Some(result.termination),
            abort: None,
            resumed_at: result.resumed_at.clone(),
            generations: result.history.clone(),
            best: result.best.as_ref().and_then(BestSolution::of),
            calls: result.calls,
            usage: result.usage,
            final_population: result.population.members.iter().map(IndividualRecord::of).collect(),
            execution: Execution { concurrency: result.config.concurrency, backend: ctx.backend.clone() },
            meta: ctx.meta.clone(),
        }
    }

    /// Partial report for a run that stopped after `cp` was written.
    pub fn from_checkpoint<G: Gene>(
        cp: &Checkpoint,
        abort: AbortInfo,
        ctx: &ReportContext,
    ) -> Result<Self, EngineError> {
        let best = match &cp.best {
            Some(record) => BestSolution::of(&record.restore::<G>()?),
            None => None,
        };
        Ok(Self {
            header: ReportHeader { written_at: now(), started_at: ctx.started_at.clone() },
            version: REPORT_VERSION,
            kind: cp.kind.clone(),
            task_digest: ctx.task_digest.clone(),
            config_digest: cp.config_digest.clone(),
            config: config_echo(&cp.config),
            seed: cp.config.seed,
            status: ReportStatus::Partial,
            termination: cp.completed,
            abort: Some(abort),
            resumed_at: cp.resumed_at.clone(),
            generations: cp.history.clone(),
            best,
            calls: cp.calls,
            usage: cp.usage,
            final_population: cp.population.clone(),
            execution: Execution { concurrency: cp.config.concurrency, backend: ctx.backend.clone() },
            meta: ctx.meta.clone(),
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn write(&self, path: &Path) -> std::io::Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, self.to_json() + "\n")
    }

    pub fn read(path: &Path) -> std::io::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
    }
}

/// Report JSON with everything that legitimately differs between identical
/// runs blanked out: header timestamps, per-generation wall clock and the
/// execution block.
pub fn masked(report_json: &str) -> Result<Value, serde_json::Error> {
    let mut v: Value = serde_json::from_str(report_json)?;
    if let Some(obj) = v.as_object_mut() {
        obj.remove("header");
        obj.remove("execution");
        if let Some(Value::Array(gens)) = obj.get_mut("generations") {
            for g in gens {
                if let Some(g) = g.as_object_mut() {
                    g.remove("wall_clock_ms");
                }
            }
        }
    }
    Ok(v)
}

pub fn write_run_report<G: Gene>(
    result: &RunResult<G>,
    ctx: &ReportContext,
    path: &Path,
) -> std::io::Result<RunReport> {
    let report = RunReport::from_result(result, ctx);
    report.write(path)?;
    Ok(report)
}
