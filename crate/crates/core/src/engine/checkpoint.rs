//! Serialized run state written after every completed generation.

use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{CallCounts, EngineConfig, EngineError, GenerationRecord, TerminationReason};
use crate::evaluation::{ConstraintViolation, FitnessReport};
use crate::gene::{parse_from_text, to_text, Gene, Individual, IndividualId, Lineage, ParseFailure, Validity};
use crate::provider::Usage;

pub const CHECKPOINT_VERSION: u32 = 1;

/// An individual with its gene in canonical text form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndividualRecord {
    pub id: IndividualId,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub gene_text: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub raw_text: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub parse_error: Option<ParseFailure>,
    pub validity: Validity,
    pub violations: Vec<ConstraintViolation>,
    pub report: Option<FitnessReport>,
    pub lineage: Lineage,
}

impl IndividualRecord {
    pub fn of<G: Gene>(ind: &Individual<G>) -> Self {
        Self {
            id: ind.id,
            gene_text: ind.gene.as_ref().map(to_text),
            raw_text: ind.raw_text.clone(),
            parse_error: ind.parse_error.clone(),
            validity: ind.validity,
            violations: ind.violations.clone(),
            report: ind.report.clone(),
            lineage: ind.lineage.clone(),
        }
    }

    pub fn restore<G: Gene>(&self) -> Result<Individual<G>, EngineError> {
        let gene = self
            .gene_text
            .as_deref()
            .map(parse_from_text::<G>)
            .transpose()
            .map_err(|e| EngineError::Checkpoint(format!("individual {}: {e}", self.id)))?;
        Ok(Individual {
            id: self.id,
            gene,
            raw_text: self.raw_text.clone(),
            parse_error: self.parse_error.clone(),
            validity: self.validity,
            violations: self.violations.clone(),
            report: self.report.clone(),
            lineage: self.lineage.clone(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub kind: String,
    pub config_digest: String,
    pub config: EngineConfig,
    /// Index of the last completed generation.
    pub generation: u32,
    /// Generator state before the next step.
    pub rng: ChaCha8Rng,
    pub population: Vec<IndividualRecord>,
    pub history: Vec<GenerationRecord>,
    pub best: Option<IndividualRecord>,
    pub calls: CallCounts,
    pub usage: Usage,
    pub next_id: IndividualId,
    /// Set once the run has terminated.
    pub completed: Option<TerminationReason>,
    pub resumed_at: Vec<u32>,
    /// Caller-owned data needed to rebuild the run (config file, backend).
    #[serde(default)]
    pub meta: serde_json::Value,
}

impl Checkpoint {
    pub fn read(path: &Path) -> Result<Self, EngineError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| EngineError::Checkpoint(format!("reading {}: {e}", path.display())))?;
        let cp: Checkpoint =
            serde_json::from_str(&text).map_err(|e| EngineError::Checkpoint(format!("{}: {e}", path.display())))?;
        if cp.version != CHECKPOINT_VERSION {
            return Err(EngineError::Checkpoint(format!("unsupported checkpoint version {}", cp.version)));
        }
        Ok(cp)
    }

    /// Writes via a temporary file and rename, so a crash never leaves a
    /// truncated checkpoint behind.
    pub fn write(&self, path: &Path) -> Result<(), EngineError> {
        let text = serde_json::to_string_pretty(self).expect("checkpoint serializes");
        let tmp = path.with_extension("tmp");
        let parent = path.parent().filter(|p| !p.as_os_str().is_empty());
        parent
            .map_or(Ok(()), std::fs::create_dir_all)
            .and_then(|_| std::fs::write(&tmp, text))
            .and_then(|_| std::fs::rename(&tmp, path))
            .map_err(|e| EngineError::Checkpoint(format!("writing {}: {e}", path.display())))
    }
}
