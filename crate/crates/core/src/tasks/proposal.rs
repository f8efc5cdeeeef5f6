//! Research proposal outline with five mandatory sections and a length cap.

use std::fmt;
use std::sync::Arc;

use rand::{Rng, RngCore};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::{candidate_index, embedded_templates, ManifestParts, TaskDef, TaskError};
use crate::evaluation::{ConstraintSpec, ConstraintViolation, Severity};
use crate::gene::{all_block_bodies, parse_from_text, to_text, Gene, Mutation, ParseFailure, VariationError};
use crate::provider::{CompletionRequest, Purpose, ScriptRule, ScriptedProvider};

pub const DEFAULT_WORD_CAP: usize = 1200;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Heading {
    Introduction,
    RelatedWork,
    Methodology,
    Experiments,
    Conclusion,
}

impl Heading {
    pub const ALL: [Heading; 5] =
        [Heading::Introduction, Heading::RelatedWork, Heading::Methodology, Heading::Experiments, Heading::Conclusion];

    pub fn as_str(self) -> &'static str {
        match self {
            Heading::Introduction => "Introduction",
            Heading::RelatedWork => "Related Work",
            Heading::Methodology => "Methodology",
            Heading::Experiments => "Experiments",
            Heading::Conclusion => "Conclusion",
        }
    }

    /// Exact match after collapsing runs of whitespace.
    pub fn parse(text: &str) -> Option<Heading> {
        let normalized = text.split_whitespace().collect::<Vec<_>>().join(" ");
        Heading::ALL.into_iter().find(|h| h.as_str() == normalized)
    }
}

impl fmt::Display for Heading {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl Serialize for Heading {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for Heading {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        Heading::parse(&text).ok_or_else(|| {
            serde::de::Error::custom(format!(
                "unknown section heading `{text}`; expected one of Introduction, Related Work, Methodology, Experiments, Conclusion"
            ))
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Section {
    pub heading: Heading,
    pub body: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "ProposalWire")]
pub struct ProposalGene {
    pub topic: String,
    pub sections: Vec<Section>,
    /// Whitespace-token count over all bodies; always recomputed.
    pub word_count: usize,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ProposalWire {
    topic: String,
    sections: Vec<Section>,
    // Accepted for compatibility, never trusted.
    #[serde(default)]
    #[allow(dead_code)]
    word_count: Option<serde_json::Value>,
}

impl From<ProposalWire> for ProposalGene {
    fn from(w: ProposalWire) -> Self {
        ProposalGene::new(w.topic, w.sections)
    }
}

pub fn count_words(sections: &[Section]) -> usize {
    sections.iter().map(|s| s.body.split_whitespace().count()).sum()
}

impl ProposalGene {
    pub fn new(topic: impl Into<String>, sections: Vec<Section>) -> Self {
        let word_count = count_words(&sections);
        Self { topic: topic.into(), sections, word_count }
    }

    pub fn section(&self, heading: Heading) -> Option<&Section> {
        self.sections.iter().find(|s| s.heading == heading)
    }

    pub fn missing(&self) -> Vec<Heading> {
        Heading::ALL.into_iter().filter(|h| self.section(*h).is_none()).collect()
    }

    /// Union of both parents' sections: A's order first, then sections only
    /// B has. Where both have a heading, `take_b[heading]` picks B's body.
    pub fn crossover_with_bits(&self, other: &Self, take_b: [bool; 5]) -> Self {
        let from_b = |h: Heading| take_b[Heading::ALL.iter().position(|x| *x == h).expect("canonical heading")];
        let mut sections: Vec<Section> = self
            .sections
            .iter()
            .map(|s| match other.section(s.heading) {
                Some(theirs) if from_b(s.heading) => theirs.clone(),
                _ => s.clone(),
            })
            .collect();
        sections.extend(other.sections.iter().filter(|s| self.section(s.heading).is_none()).cloned());
        ProposalGene::new(self.topic.clone(), sections)
    }
}

/// Stock text structural mutation draws from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProposalContext {
    pub topic: String,
    pub word_cap: usize,
}

fn stock_section(h: Heading, topic: &str) -> String {
    match h {
        Heading::Introduction => format!(
            "{topic} could shorten the path from symptoms to a confirmed diagnosis. We motivate the problem, state the gap in current practice, and summarize a single clear contribution."
        ),
        Heading::RelatedWork => "Prior systems either rely on a single data modality or report results on curated benchmarks that do not reflect clinical workflows. We position our approach against rule-based triage tools, image-only deep models, and recent multimodal foundation models.".into(),
        Heading::Methodology => "We combine imaging, laboratory values and free-text notes in a multimodal model with calibrated uncertainty, and defer to a clinician whenever confidence falls below a validated threshold.".into(),
        Heading::Experiments => "We evaluate on retrospective data from two hospitals with a held-out site for external validation, reporting sensitivity, specificity, calibration error, and the rate of deferrals to clinicians.".into(),
        Heading::Conclusion => "If successful, the project delivers a diagnostic aid that is accurate, honest about its uncertainty, and ready for a prospective pilot.".into(),
    }
}

const ELABORATIONS: [&str; 6] = [
    "We make this concrete with a worked example drawn from emergency radiology.",
    "This choice is justified by the failure modes reported in earlier deployments.",
    "All code and trained models will be released to support reproduction.",
    "An ablation isolates the contribution of each data modality.",
    "We also discuss fairness across patient subgroups and how it is measured.",
    "A clinician advisory board reviews every stage of the protocol.",
];

impl Gene for ProposalGene {
    const KIND: &'static str = "proposal";
    type Context = ProposalContext;

    fn render(&self) -> String {
        let mut out = format!("Research Proposal: {}\n({} words)\n", self.topic, self.word_count);
        for s in &self.sections {
            out.push_str(&format!("\n## {}\n{}\n", s.heading, s.body));
        }
        out.trim_end().to_string()
    }

    fn format_spec() -> String {
        "Answer with exactly one block in this form, with one entry per section (headings must be exactly Introduction, Related Work, Methodology, Experiments, Conclusion):\n\
         ===GENE-BEGIN kind=proposal v=1===\n\
         {\"topic\": \"...\", \"sections\": [{\"heading\": \"Introduction\", \"body\": \"...\"}, ...], \"word_count\": 0}\n\
         ===GENE-END==="
            .to_string()
    }

    fn check_shape(&self) -> Result<(), ParseFailure> {
        for (i, s) in self.sections.iter().enumerate() {
            if self.sections[..i].iter().any(|t| t.heading == s.heading) {
                return Err(ParseFailure::InvalidValue(format!("section `{}` appears more than once", s.heading)));
            }
        }
        Ok(())
    }

    fn structural_crossover<R: RngCore + ?Sized>(&self, other: &Self, rng: &mut R) -> Result<Self, VariationError> {
        let bits = std::array::from_fn(|_| rng.gen_bool(0.5));
        Ok(self.crossover_with_bits(other, bits))
    }

    /// Adds one missing section when there is one, otherwise appends an
    /// elaboration sentence to one section.
    fn structural_mutate<R: RngCore + ?Sized>(&self, ctx: &ProposalContext, rng: &mut R) -> Mutation<Self> {
        let missing = self.missing();
        let mut sections = self.sections.clone();
        if !missing.is_empty() {
            let h = missing[rng.gen_range(0..missing.len())];
            sections.push(Section { heading: h, body: stock_section(h, &ctx.topic) });
        } else if !sections.is_empty() {
            let i = rng.gen_range(0..sections.len());
            let extra = ELABORATIONS[rng.gen_range(0..ELABORATIONS.len())];
            let body = &mut sections[i].body;
            if !body.is_empty() {
                body.push(' ');
            }
            body.push_str(extra);
        } else {
            return Mutation { gene: self.clone(), changed: false };
        }
        let gene = ProposalGene::new(self.topic.clone(), sections);
        Mutation { changed: gene != *self, gene }
    }
}

struct RequiredSections {
    penalty: f64,
}

impl ConstraintSpec<ProposalGene> for RequiredSections {
    fn id(&self) -> &str {
        "missing-section"
    }

    fn severity(&self) -> Severity {
        Severity::Hard
    }

    fn description(&self) -> String {
        "all five sections (Introduction, Related Work, Methodology, Experiments, Conclusion) must be present".into()
    }

    fn check(&self, gene: &ProposalGene) -> Vec<ConstraintViolation> {
        gene.missing()
            .into_iter()
            .map(|h| ConstraintViolation {
                constraint_id: self.id().into(),
                severity: Severity::Hard,
                message: format!("missing section: {h}"),
                measured: None,
                limit: None,
                penalty: self.penalty,
            })
            .collect()
    }
}

struct WordCap {
    cap: usize,
    penalty: f64,
}

impl ConstraintSpec<ProposalGene> for WordCap {
    fn id(&self) -> &str {
        "over-length"
    }

    fn severity(&self) -> Severity {
        Severity::Soft
    }

    fn description(&self) -> String {
        format!("at most {} words in total", self.cap)
    }

    fn check(&self, gene: &ProposalGene) -> Vec<ConstraintViolation> {
        if gene.word_count <= self.cap {
            return Vec::new();
        }
        vec![ConstraintViolation {
            constraint_id: self.id().into(),
            severity: Severity::Soft,
            message: format!("{} words, cap is {}", gene.word_count, self.cap),
            measured: Some(gene.word_count as f64),
            limit: Some(self.cap as f64),
            penalty: self.penalty,
        }]
    }
}

/// Hard: all five headings present. Soft: word count within `word_cap`.
pub fn proposal_constraints(word_cap: usize) -> Vec<Box<dyn ConstraintSpec<ProposalGene>>> {
    with_penalties(word_cap, Severity::Hard.default_penalty(), Severity::Soft.default_penalty())
}

fn with_penalties(word_cap: usize, missing: f64, over: f64) -> Vec<Box<dyn ConstraintSpec<ProposalGene>>> {
    vec![Box::new(RequiredSections { penalty: missing }), Box::new(WordCap { cap: word_cap, penalty: over })]
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProposalParams {
    topic: String,
    #[serde(default = "default_cap")]
    word_cap: usize,
}

fn default_cap() -> usize {
    DEFAULT_WORD_CAP
}

const TEMPLATES: &[(&str, &str)] = &[
    ("manifest.json", include_str!("../../../../tasks/proposal/templates/manifest.json")),
    ("generate_outline.txt", include_str!("../../../../tasks/proposal/templates/generate_outline.txt")),
    ("generate_problem_first.txt", include_str!("../../../../tasks/proposal/templates/generate_problem_first.txt")),
    ("crossover.txt", include_str!("../../../../tasks/proposal/templates/crossover.txt")),
    ("mutation.txt", include_str!("../../../../tasks/proposal/templates/mutation.txt")),
    ("evaluation.txt", include_str!("../../../../tasks/proposal/templates/evaluation.txt")),
    ("repair.txt", include_str!("../../../../tasks/proposal/templates/repair.txt")),
];

pub fn task(topic: &str, word_cap: usize) -> TaskDef<ProposalGene> {
    TaskDef {
        description: format!(
            "Write a structured outline for a research project proposal on the topic: {topic}. It must have Introduction, Related Work, Methodology, Experiments and Conclusion sections and stay short."
        ),
        system_prompt: None,
        constraints: proposal_constraints(word_cap),
        templates: embedded_templates(TEMPLATES),
        rubric: include_str!("../../../../tasks/proposal/rubric.txt").trim_end().to_string(),
        context: ProposalContext { topic: topic.into(), word_cap },
    }
}

pub(super) fn from_manifest(parts: ManifestParts) -> Result<TaskDef<ProposalGene>, TaskError> {
    let p: ProposalParams = parts.params()?;
    if p.word_cap == 0 {
        return Err(TaskError::Params("word_cap must be positive".into()));
    }
    Ok(TaskDef {
        constraints: with_penalties(
            p.word_cap,
            parts.penalty("missing-section", Severity::Hard.default_penalty()),
            parts.penalty("over-length", Severity::Soft.default_penalty()),
        ),
        description: parts.description,
        system_prompt: parts.system_prompt,
        templates: parts.templates,
        rubric: parts.rubric,
        context: ProposalContext { topic: p.topic, word_cap: p.word_cap },
    })
}

fn drafts_in(prompt: &str) -> Vec<ProposalGene> {
    all_block_bodies(prompt)
        .into_iter()
        .filter_map(|body| parse_from_text(&format!("===GENE-BEGIN kind=proposal v=1===\n{body}\n===GENE-END===")).ok())
        .collect()
}

/// Initial draft for seed `k`. One in three is complete; the rest blur
/// Related Work into the introduction or leave Experiments out.
pub fn draft(ctx: &ProposalContext, k: usize, rng: &mut ChaCha8Rng) -> ProposalGene {
    let skip = match k % 3 {
        0 => None,
        1 => Some(Heading::RelatedWork),
        _ => Some(Heading::Experiments),
    };
    let sections = Heading::ALL
        .into_iter()
        .filter(|h| Some(*h) != skip)
        .map(|h| {
            let mut body = stock_section(h, &ctx.topic);
            for _ in 0..rng.gen_range(0..3) {
                body.push(' ');
                body.push_str(ELABORATIONS[rng.gen_range(0..ELABORATIONS.len())]);
            }
            Section { heading: h, body }
        })
        .collect();
    ProposalGene::new(ctx.topic.clone(), sections)
}

/// Heuristic 1..10 rating: section coverage dominates, depth adds up to two.
pub fn heuristic_score(gene: &ProposalGene, ctx: &ProposalContext) -> f64 {
    let present = (5 - gene.missing().len()) as f64;
    let depth = (gene.word_count as f64 / 250.0).min(1.0);
    let over = if gene.word_count > ctx.word_cap { 1.0 } else { 0.0 };
    let score = 1.0 + 1.4 * present + 2.0 * depth - over;
    (score.clamp(1.0, 10.0) * 10.0).round() / 10.0
}

/// Scripted stand-in for the model on the proposal task.
pub fn simulator(task: &TaskDef<ProposalGene>) -> ScriptedProvider {
    let ctx = Arc::new(task.context.clone());

    let gen_ctx = ctx.clone();
    let generate = move |req: &CompletionRequest, rng: &mut ChaCha8Rng| {
        let k = candidate_index(&req.joined_content()).unwrap_or(0);
        format!("Here is a first draft.\n\n{}", to_text(&draft(&gen_ctx, k, rng)))
    };

    let crossover = |req: &CompletionRequest, rng: &mut ChaCha8Rng| match drafts_in(&req.joined_content()).as_slice() {
        [a, b, ..] => {
            let child = a.structural_crossover(b, rng).expect("proposal crossover is total");
            format!("Merged draft:\n\n{}", to_text(&child))
        }
        _ => "I need two drafts to merge.".to_string(),
    };

    let mut_ctx = ctx.clone();
    let mutate = move |req: &CompletionRequest, rng: &mut ChaCha8Rng| match drafts_in(&req.joined_content()).first() {
        Some(g) => format!("Revised draft:\n\n{}", to_text(&g.structural_mutate(&mut_ctx, rng).gene)),
        None => "I could not find the draft to revise.".to_string(),
    };

    let eval_ctx = ctx.clone();
    let evaluate = move |req: &CompletionRequest, _: &mut ChaCha8Rng| match drafts_in(&req.joined_content()).first() {
        Some(g) => {
            let missing: Vec<&str> = g.missing().iter().map(|h| h.as_str()).collect();
            let note = if missing.is_empty() {
                "All sections are present.".to_string()
            } else {
                format!("Missing: {}.", missing.join(", "))
            };
            format!("{note} {} words.\nSCORE: {:.1}", g.word_count, heuristic_score(g, &eval_ctx))
        }
        None => "There is no draft to rate.".to_string(),
    };

    let repair = |req: &CompletionRequest, _: &mut ChaCha8Rng| match drafts_in(&req.joined_content()).first() {
        Some(g) => to_text(g),
        None => "I could not recover a draft from that reply.".to_string(),
    };

    ScriptedProvider::new(vec![
        ScriptRule::handler(Some(Purpose::Generation), None, generate),
        ScriptRule::handler(Some(Purpose::Crossover), None, crossover),
        ScriptRule::handler(Some(Purpose::Mutation), None, mutate),
        ScriptRule::handler(Some(Purpose::Evaluation), None, evaluate),
        ScriptRule::handler(Some(Purpose::Repair), None, repair),
    ])
}
