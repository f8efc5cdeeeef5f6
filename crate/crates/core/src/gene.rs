//! The gene contract shared by every task, plus the containers the engine
//! evolves.
//!
//! A gene travels between the engine and the model as text. The canonical
//! text is a human-readable rendering followed by exactly one machine block:
//!
//! ```text
//! ===GENE-BEGIN kind=<kind> v=1===
//! { ...task-specific JSON... }
//! ===GENE-END===
//! ```
//!
//! Parsing only checks shape (block present, JSON well formed, fields typed).
//! Domain rules such as budgets or day counts are constraints and live in
//! [`crate::evaluation`].

use std::fmt;

use rand::RngCore;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::evaluation::{ConstraintViolation, FitnessReport, Severity};

const BEGIN_MARKER: &str = "===GENE-BEGIN";
const END_MARKER: &str = "===GENE-END===";
const BLOCK_VERSION: &str = "1";

/// Why a piece of text could not be turned into a gene.
///
/// This is a value describing an invalid candidate, not a program fault.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, thiserror::Error)]
#[serde(tag = "reason", content = "detail", rename_all = "kebab-case")]
pub enum ParseFailure {
    #[error("no delimited gene block found")]
    NoBlock,
    #[error("malformed gene block: {0}")]
    MalformedBlock(String),
    #[error("block declares kind `{found}`, expected `{expected}`")]
    KindMismatch { expected: String, found: String },
    #[error("missing required field `{0}`")]
    MissingField(String),
    #[error("type mismatch: {0}")]
    TypeMismatch(String),
    #[error("invalid field value: {0}")]
    InvalidValue(String),
}

/// Errors from structural variation operators.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum VariationError {
    #[error("parents are not structurally compatible: {0}")]
    IncompatibleKinds(String),
}

/// Result of a structural mutation.
#[derive(Debug, Clone, PartialEq)]
pub struct Mutation<G> {
    pub gene: G,
    /// False when no alternative existed for any component.
    pub changed: bool,
}

/// A structured candidate solution.
///
/// Implementations serialize their payload with serde; field order of the
/// serialized struct is the canonical order.
pub trait Gene: Clone + PartialEq + fmt::Debug + Serialize + DeserializeOwned + Send + Sync + 'static {
    /// Task identifier written into the block header.
    const KIND: &'static str;

    /// Task-owned data the structural operators draw alternatives from.
    type Context: Send + Sync;

    /// Human-readable rendering placed above the machine block.
    fn render(&self) -> String;

    /// Describes the machine block for prompts (`{format_spec}`).
    fn format_spec() -> String;

    /// Syntactic checks serde cannot express (time formats, unique keys).
    fn check_shape(&self) -> Result<(), ParseFailure> {
        Ok(())
    }

    /// Builds an offspring from components of `self` and `other` only.
    fn structural_crossover<R: RngCore + ?Sized>(&self, other: &Self, rng: &mut R) -> Result<Self, VariationError>;

    /// Alters exactly one component, drawing the replacement from `ctx`.
    fn structural_mutate<R: RngCore + ?Sized>(&self, ctx: &Self::Context, rng: &mut R) -> Mutation<Self>;
}

/// Canonical JSON of the gene payload, with `=` escaped so the block markers
/// can never appear inside it.
fn canonical_json<G: Gene>(gene: &G) -> String {
    let json = serde_json::to_string_pretty(gene).expect("gene payloads serialize to JSON");
    // JSON only has `=` inside strings, where the unicode escape is equivalent.
    json.replace('=', "\\u003d")
}

/// Serializes a gene to its canonical text.
pub fn to_text<G: Gene>(gene: &G) -> String {
    let human = gene.render().replace(BEGIN_MARKER, "== GENE-BEGIN").replace(END_MARKER, "== GENE-END ==");
    format!("{human}\n\n{BEGIN_MARKER} kind={} v={BLOCK_VERSION}===\n{}\n{END_MARKER}\n", G::KIND, canonical_json(gene))
}

/// Locates the first gene block in `text` and returns `(kind, version, body)`.
pub fn extract_block(text: &str) -> Result<(String, String, &str), ParseFailure> {
    let start = text.find(BEGIN_MARKER).ok_or(ParseFailure::NoBlock)?;
    let after = &text[start + BEGIN_MARKER.len()..];
    let header_end =
        after.find("===").ok_or_else(|| ParseFailure::MalformedBlock("unterminated BEGIN marker".into()))?;
    let header = &after[..header_end];
    let body_and_rest = &after[header_end + 3..];
    let end =
        body_and_rest.find(END_MARKER).ok_or_else(|| ParseFailure::MalformedBlock("missing END marker".into()))?;

    let mut kind = None;
    let mut version = None;
    for attr in header.split_whitespace() {
        match attr.split_once('=') {
            Some(("kind", v)) => kind = Some(v.to_string()),
            Some(("v", v)) => version = Some(v.to_string()),
            _ => return Err(ParseFailure::MalformedBlock(format!("unexpected header attribute `{attr}`"))),
        }
    }
    let kind = kind.ok_or_else(|| ParseFailure::MalformedBlock("BEGIN marker lacks kind".into()))?;
    let version = version.ok_or_else(|| ParseFailure::MalformedBlock("BEGIN marker lacks version".into()))?;
    Ok((kind, version, &body_and_rest[..end]))
}

/// Finds every gene block in `text`, in order. Used by scripted providers to
/// pull parents back out of a rendered prompt.
pub fn all_block_bodies(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut rest = text;
    while let Ok((_, _, body)) = extract_block(rest) {
        out.push(body);
        let body_offset = body.as_ptr() as usize - rest.as_ptr() as usize;
        rest = &rest[body_offset + body.len()..];
    }
    out
}

fn classify_serde_error(err: serde_json::Error) -> ParseFailure {
    use serde_json::error::Category;
    let msg = err.to_string();
    match err.classify() {
        Category::Syntax | Category::Eof | Category::Io => ParseFailure::MalformedBlock(msg),
        Category::Data => {
            if let Some(rest) = msg.strip_prefix("missing field `") {
                let name = rest.split('`').next().unwrap_or_default();
                ParseFailure::MissingField(name.to_string())
            } else if msg.starts_with("invalid type") || msg.starts_with("invalid length") {
                ParseFailure::TypeMismatch(msg)
            } else {
                ParseFailure::InvalidValue(msg)
            }
        }
    }
}

/// Parses untrusted text into a gene of kind `G`. Prose around the block is
/// ignored.
pub fn parse_from_text<G: Gene>(text: &str) -> Result<G, ParseFailure> {
    let (kind, version, body) = extract_block(text)?;
    if kind != G::KIND {
        return Err(ParseFailure::KindMismatch { expected: G::KIND.to_string(), found: kind });
    }
    if version != BLOCK_VERSION {
        return Err(ParseFailure::MalformedBlock(format!("unsupported block version {version}")));
    }
    let gene: G = serde_json::from_str(body.trim()).map_err(classify_serde_error)?;
    gene.check_shape()?;
    Ok(gene)
}

/// Content hash of the canonical text, hex encoded.
pub fn fingerprint<G: Gene>(gene: &G) -> String {
    hex::encode(Sha256::digest(to_text(gene).as_bytes()))
}

pub type IndividualId = u64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Validity {
    Unevaluated,
    Valid,
    HardViolation,
    ParseFailure,
    /// Too many evaluation samples produced no usable score.
    ScoreFailure,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Operator {
    Seed,
    Crossover,
    Mutation,
    /// Unchanged copy of the fitter parent (crossover skipped, no mutation).
    Clone,
    Elite,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lineage {
    pub generation_born: u32,
    pub parent_ids: Vec<IndividualId>,
    pub operator: Operator,
    /// Set when a crossover or clone offspring was additionally mutated.
    #[serde(default)]
    pub mutated: bool,
    /// Set when the gene came back through the repair prompt.
    #[serde(default)]
    pub repaired: bool,
    /// Set when model output never parsed and a structural operator was used instead.
    #[serde(default)]
    pub structural_fallback: bool,
}

impl Lineage {
    pub fn seed(generation: u32) -> Self {
        Self::new(generation, Vec::new(), Operator::Seed)
    }

    pub fn new(generation_born: u32, parent_ids: Vec<IndividualId>, operator: Operator) -> Self {
        Self { generation_born, parent_ids, operator, mutated: false, repaired: false, structural_fallback: false }
    }

    /// Checks the parent-count rule for the operator.
    pub fn is_consistent(&self) -> bool {
        let n = self.parent_ids.len();
        match self.operator {
            Operator::Seed => n == 0,
            Operator::Crossover => n == 2,
            Operator::Mutation | Operator::Clone | Operator::Elite => n == 1,
        }
    }
}

/// A gene plus its evaluation state and lineage.
#[derive(Debug, Clone, PartialEq)]
pub struct Individual<G> {
    pub id: IndividualId,
    /// `None` only for parse failures.
    pub gene: Option<G>,
    /// Last raw model output when parsing failed.
    pub raw_text: Option<String>,
    pub parse_error: Option<ParseFailure>,
    pub validity: Validity,
    pub violations: Vec<ConstraintViolation>,
    pub report: Option<FitnessReport>,
    pub lineage: Lineage,
}

impl<G: Gene> Individual<G> {
    pub fn new(id: IndividualId, gene: G, lineage: Lineage) -> Self {
        Self {
            id,
            gene: Some(gene),
            raw_text: None,
            parse_error: None,
            validity: Validity::Unevaluated,
            violations: Vec::new(),
            report: None,
            lineage,
        }
    }

    pub fn parse_failed(id: IndividualId, raw_text: String, error: ParseFailure, lineage: Lineage) -> Self {
        Self {
            id,
            gene: None,
            raw_text: Some(raw_text),
            parse_error: Some(error),
            validity: Validity::ParseFailure,
            violations: Vec::new(),
            report: None,
            lineage,
        }
    }

    /// Selectable fitness: the effective normalized score, absent when the
    /// individual is unevaluated, unparsed or filtered out.
    pub fn fitness(&self) -> Option<f64> {
        self.report.as_ref().and_then(|r| r.effective.score())
    }

    pub fn raw_score(&self) -> Option<f64> {
        self.report.as_ref().and_then(|r| r.raw_score)
    }

    pub fn has_hard_violation(&self) -> bool {
        self.violations.iter().any(|v| v.severity == Severity::Hard)
    }

    pub fn fingerprint(&self) -> Option<String> {
        self.gene.as_ref().map(fingerprint)
    }
}

/// One generation of individuals.
#[derive(Debug, Clone, PartialEq)]
pub struct Population<G> {
    pub generation: u32,
    pub members: Vec<Individual<G>>,
}

impl<G: Gene> Population<G> {
    pub fn get(&self, id: IndividualId) -> Option<&Individual<G>> {
        self.members.iter().find(|m| m.id == id)
    }

    /// Members carrying a selectable fitness.
    pub fn selectable(&self) -> impl Iterator<Item = &Individual<G>> {
        self.members.iter().filter(|m| m.fitness().is_some())
    }

    /// Number of members whose fingerprint repeats an earlier member's.
    pub fn duplicate_count(&self) -> usize {
        let mut seen = std::collections::HashSet::new();
        self.members.iter().filter_map(|m| m.fingerprint()).filter(|fp| !seen.insert(fp.clone())).count()
    }
}
