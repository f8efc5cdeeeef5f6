//! Task definitions: gene kind, constraints, prompts, rubric.
//!
//! Three kinds ship with the crate: travel itineraries, research proposal
//! outlines, and a synthetic slot-choice knapsack whose optimum can be found
//! by enumeration. Each kind also provides a scripted simulator that stands
//! in for the model so the full prompt, parse and score path runs offline.

pub mod proposal;
pub mod synthetic;
pub mod travel;

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use serde::Deserialize;
use sha2::{Digest, Sha256};

use crate::evaluation::{describe_constraints, ConstraintSpec};
use crate::gene::Gene;
use crate::provider::{Message, ScriptedProvider};
use crate::templating::{TemplateError, TemplateSet};

pub use proposal::ProposalGene;
pub use synthetic::KnapsackGene;
pub use travel::TravelGene;

/// Everything the engine needs to optimize one kind of gene.
pub struct TaskDef<G: Gene> {
    pub description: String,
    pub system_prompt: Option<String>,
    pub constraints: Vec<Box<dyn ConstraintSpec<G>>>,
    pub templates: TemplateSet,
    pub rubric: String,
    pub context: G::Context,
}

impl<G: Gene> TaskDef<G> {
    /// Bindings every prompt gets: task description, constraints, format.
    pub fn base_bindings(&self) -> BTreeMap<&'static str, String> {
        BTreeMap::from([
            ("task_description", self.description.clone()),
            ("constraints", describe_constraints(&self.constraints)),
            ("format_spec", G::format_spec()),
        ])
    }

    pub fn messages(&self, prompt: String) -> Vec<Message> {
        let mut messages = Vec::with_capacity(2);
        if let Some(system) = self.system_prompt.as_ref().filter(|s| !s.is_empty()) {
            messages.push(Message::system(system.clone()));
        }
        messages.push(Message::user(prompt));
        messages
    }

    /// Hash over everything that shapes prompts and validation.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(G::KIND.as_bytes());
        h.update([0]);
        h.update(self.description.as_bytes());
        h.update([0]);
        h.update(self.system_prompt.as_deref().unwrap_or_default().as_bytes());
        h.update([0]);
        h.update(self.rubric.as_bytes());
        for c in &self.constraints {
            h.update([0]);
            h.update(c.id().as_bytes());
            h.update(c.description().as_bytes());
        }
        let t = &self.templates;
        for template in t.generation().iter().chain([t.crossover(), t.mutation(), t.evaluation()]).chain(t.repair()) {
            h.update([0]);
            h.update(template.body().as_bytes());
        }
        hex::encode(h.finalize())
    }
}

impl<G: Gene> std::fmt::Debug for TaskDef<G> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TaskDef")
            .field("kind", &G::KIND)
            .field("description", &self.description)
            .field("constraints", &self.constraints)
            .finish()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TaskError {
    #[error("reading {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("task manifest {path}: {message}")]
    Manifest { path: PathBuf, message: String },
    #[error("unknown gene kind `{0}`")]
    UnknownKind(String),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("invalid task parameters: {0}")]
    Params(String),
}

/// On-disk task registration.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskManifest {
    pub kind: String,
    pub description: String,
    #[serde(default)]
    pub system_prompt: Option<String>,
    pub template_dir: PathBuf,
    pub rubric_file: PathBuf,
    #[serde(default)]
    pub params: serde_json::Value,
    /// Per-constraint penalty overrides, keyed by constraint id.
    #[serde(default)]
    pub penalties: HashMap<String, f64>,
}

/// Shared pieces a kind-specific builder needs.
pub struct ManifestParts {
    pub description: String,
    pub system_prompt: Option<String>,
    pub templates: TemplateSet,
    pub rubric: String,
    pub params: serde_json::Value,
    pub penalties: HashMap<String, f64>,
}

impl ManifestParts {
    pub fn penalty(&self, id: &str, default: f64) -> f64 {
        self.penalties.get(id).copied().unwrap_or(default)
    }

    pub fn params<T: serde::de::DeserializeOwned>(&self) -> Result<T, TaskError> {
        let value = if self.params.is_null() { serde_json::json!({}) } else { self.params.clone() };
        serde_json::from_value(value).map_err(|e| TaskError::Params(e.to_string()))
    }
}

/// A loaded task of any built-in kind.
#[derive(Debug)]
pub enum AnyTask {
    Travel(TaskDef<TravelGene>),
    Proposal(TaskDef<ProposalGene>),
    Synthetic(TaskDef<KnapsackGene>),
}

impl AnyTask {
    pub fn kind(&self) -> &'static str {
        match self {
            AnyTask::Travel(_) => TravelGene::KIND,
            AnyTask::Proposal(_) => ProposalGene::KIND,
            AnyTask::Synthetic(_) => KnapsackGene::KIND,
        }
    }

    pub fn load(manifest_path: &Path) -> Result<Self, TaskError> {
        let text = std::fs::read_to_string(manifest_path)
            .map_err(|source| TaskError::Io { path: manifest_path.to_path_buf(), source })?;
        let manifest: TaskManifest = serde_json::from_str(&text)
            .map_err(|e| TaskError::Manifest { path: manifest_path.to_path_buf(), message: e.to_string() })?;
        let base = manifest_path.parent().unwrap_or(Path::new("."));
        let templates = TemplateSet::load_dir(&base.join(&manifest.template_dir))?;
        let rubric_path = base.join(&manifest.rubric_file);
        let rubric = std::fs::read_to_string(&rubric_path)
            .map_err(|source| TaskError::Io { path: rubric_path.clone(), source })?;
        if templates.task != manifest.kind {
            return Err(TaskError::Manifest {
                path: manifest_path.to_path_buf(),
                message: format!("template set is for `{}`, manifest kind is `{}`", templates.task, manifest.kind),
            });
        }
        let parts = ManifestParts {
            description: manifest.description,
            system_prompt: manifest.system_prompt,
            templates,
            rubric: rubric.trim_end().to_string(),
            params: manifest.params,
            penalties: manifest.penalties,
        };
        match manifest.kind.as_str() {
            TravelGene::KIND => Ok(AnyTask::Travel(travel::from_manifest(parts)?)),
            ProposalGene::KIND => Ok(AnyTask::Proposal(proposal::from_manifest(parts)?)),
            KnapsackGene::KIND => Ok(AnyTask::Synthetic(synthetic::from_manifest(parts)?)),
            other => Err(TaskError::UnknownKind(other.to_string())),
        }
    }

    pub fn digest(&self) -> String {
        match self {
            AnyTask::Travel(t) => t.digest(),
            AnyTask::Proposal(t) => t.digest(),
            AnyTask::Synthetic(t) => t.digest(),
        }
    }

    /// The kind's offline stand-in for the model.
    pub fn simulator(&self) -> ScriptedProvider {
        match self {
            AnyTask::Travel(t) => travel::simulator(t),
            AnyTask::Proposal(t) => proposal::simulator(t),
            AnyTask::Synthetic(t) => synthetic::simulator(&t.context),
        }
    }
}

/// Builds a template set from files embedded in the binary.
pub(crate) fn embedded_templates(files: &[(&str, &str)]) -> TemplateSet {
    let lookup = |name: &str| {
        files
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, text)| text.to_string())
            .ok_or_else(|| TemplateError::BadFile { file: name.to_string(), message: "not embedded".into() })
    };
    TemplateSet::load_with(lookup).expect("embedded templates are valid")
}

/// Extracts the seed index the engine writes into generation prompts.
pub(crate) fn candidate_index(prompt: &str) -> Option<usize> {
    static RE: std::sync::OnceLock<regex::Regex> = std::sync::OnceLock::new();
    let re = RE.get_or_init(|| regex::Regex::new(r"[Cc]andidate (\d+) of (\d+)").expect("static regex"));
    re.captures(prompt).and_then(|c| c[1].parse().ok())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn repo_tasks() -> PathBuf {
        Path::new(env!("CARGO_MANIFEST_DIR")).join("../../tasks")
    }

    #[test]
    fn shipped_manifests_load() {
        for (dir, kind) in [("travel", "travel"), ("proposal", "proposal"), ("synthetic", "synthetic")] {
            let task = AnyTask::load(&repo_tasks().join(dir).join("task.json")).unwrap();
            assert_eq!(task.kind(), kind);
        }
    }

    #[test]
    fn digest_tracks_content() {
        let a = AnyTask::load(&repo_tasks().join("travel/task.json")).unwrap();
        let b = AnyTask::load(&repo_tasks().join("travel/task.json")).unwrap();
        assert_eq!(a.digest(), b.digest());
        let c = AnyTask::load(&repo_tasks().join("proposal/task.json")).unwrap();
        assert_ne!(a.digest(), c.digest());
    }

    #[test]
    fn unknown_manifest_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("task.json");
        std::fs::write(&path, r#"{"kind":"travel","description":"x","template_dir":"t","rubric_file":"r","oops":1}"#)
            .unwrap();
        assert!(matches!(AnyTask::load(&path), Err(TaskError::Manifest { .. })));
    }

    #[test]
    fn candidate_index_parsing() {
        assert_eq!(candidate_index("This is candidate 3 of 10."), Some(3));
        assert_eq!(candidate_index("no index here"), None);
    }
}
