//! Prompt templates with `{placeholder}` tokens.
//!
//! Templates are validated when loaded: every token must belong to the fixed
//! vocabulary and each role's mandatory tokens must be present. Rendering a
//! validated template can then only fail on a missing binding. `{{` and `}}`
//! produce literal braces.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::Deserialize;

use crate::provider::Purpose;

/// Every placeholder a template may use.
pub const VOCABULARY: [&str; 8] =
    ["task_description", "constraints", "candidate", "parent_a", "parent_b", "rubric", "variation_hint", "format_spec"];

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TemplateError {
    #[error("template `{template}` uses unknown placeholder {{{name}}}")]
    UnknownPlaceholder { template: String, name: String },
    #[error("template `{template}` ({role}) must contain {{{name}}}")]
    MissingMandatory { template: String, role: Purpose, name: String },
    #[error("template `{template}`: unbalanced brace at byte {offset}")]
    UnbalancedBrace { template: String, offset: usize },
    #[error("missing binding for {{{0}}}")]
    MissingBinding(String),
    #[error("template file {file}: {message}")]
    BadFile { file: String, message: String },
    #[error("template set: {0}")]
    BadSet(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Segment {
    Literal(String),
    Placeholder(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    name: String,
    role: Purpose,
    body: String,
    segments: Vec<Segment>,
    required: BTreeSet<String>,
}

fn mandatory_for(role: Purpose) -> &'static [&'static str] {
    match role {
        Purpose::Generation => &[],
        Purpose::Crossover => &["parent_a", "parent_b"],
        Purpose::Mutation | Purpose::Repair => &["candidate"],
        Purpose::Evaluation => &["candidate", "rubric"],
    }
}

fn tokenize(name: &str, body: &str) -> Result<Vec<Segment>, TemplateError> {
    let mut segments = Vec::new();
    let mut literal = String::new();
    let bytes = body.as_bytes();
    let mut i = 0;
    while i < body.len() {
        let c = bytes[i];
        if c == b'{' && bytes.get(i + 1) == Some(&b'{') {
            literal.push('{');
            i += 2;
        } else if c == b'}' && bytes.get(i + 1) == Some(&b'}') {
            literal.push('}');
            i += 2;
        } else if c == b'{' {
            let close = body[i + 1..]
                .find('}')
                .ok_or_else(|| TemplateError::UnbalancedBrace { template: name.to_string(), offset: i })?;
            let token = &body[i + 1..i + 1 + close];
            if !VOCABULARY.contains(&token) {
                return Err(TemplateError::UnknownPlaceholder { template: name.to_string(), name: token.to_string() });
            }
            if !literal.is_empty() {
                segments.push(Segment::Literal(std::mem::take(&mut literal)));
            }
            segments.push(Segment::Placeholder(token.to_string()));
            i += close + 2;
        } else if c == b'}' {
            return Err(TemplateError::UnbalancedBrace { template: name.to_string(), offset: i });
        } else {
            let ch = body[i..].chars().next().expect("in bounds");
            literal.push(ch);
            i += ch.len_utf8();
        }
    }
    if !literal.is_empty() {
        segments.push(Segment::Literal(literal));
    }
    Ok(segments)
}

impl PromptTemplate {
    /// Validates and compiles a template.
    pub fn new(name: impl Into<String>, role: Purpose, body: impl Into<String>) -> Result<Self, TemplateError> {
        let name = name.into();
        let body = body.into();
        let segments = tokenize(&name, &body)?;
        let required: BTreeSet<String> = segments
            .iter()
            .filter_map(|s| match s {
                Segment::Placeholder(p) => Some(p.clone()),
                Segment::Literal(_) => None,
            })
            .collect();
        if let Some(missing) = mandatory_for(role).iter().find(|m| !required.contains(**m)) {
            return Err(TemplateError::MissingMandatory { template: name, role, name: missing.to_string() });
        }
        Ok(Self { name, role, body, segments, required })
    }

    /// Parses a template file: `name:` line, `role:` line, blank line, body.
    pub fn parse_file(file: &str, text: &str) -> Result<Self, TemplateError> {
        let bad = |message: &str| TemplateError::BadFile { file: file.to_string(), message: message.to_string() };
        let mut parts = text.splitn(4, '\n');
        let name = parts
            .next()
            .and_then(|l| l.trim_end_matches('\r').strip_prefix("name:"))
            .ok_or_else(|| bad("first line must be `name: ...`"))?
            .trim();
        let role = parts
            .next()
            .and_then(|l| l.trim_end_matches('\r').strip_prefix("role:"))
            .ok_or_else(|| bad("second line must be `role: ...`"))?
            .trim();
        let role: Purpose = role.parse().map_err(|e: String| bad(&e))?;
        match parts.next() {
            Some(blank) if blank.trim().is_empty() => {}
            _ => return Err(bad("third line must be blank")),
        }
        let body = parts.next().unwrap_or_default();
        Self::new(name, role, body)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn role(&self) -> Purpose {
        self.role
    }

    pub fn body(&self) -> &str {
        &self.body
    }

    pub fn required_placeholders(&self) -> &BTreeSet<String> {
        &self.required
    }

    pub fn uses(&self, placeholder: &str) -> bool {
        self.required.contains(placeholder)
    }

    /// Substitutes every placeholder. Extra bindings are ignored.
    pub fn render(&self, bindings: &BTreeMap<&str, String>) -> Result<String, TemplateError> {
        let mut out = String::with_capacity(self.body.len());
        for segment in &self.segments {
            match segment {
                Segment::Literal(text) => out.push_str(text),
                Segment::Placeholder(name) => {
                    let value =
                        bindings.get(name.as_str()).ok_or_else(|| TemplateError::MissingBinding(name.clone()))?;
                    out.push_str(value);
                }
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    task: String,
    generation: Vec<String>,
    crossover: String,
    mutation: String,
    evaluation: String,
    #[serde(default)]
    repair: Option<String>,
}

/// The prompts one task uses.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateSet {
    pub task: String,
    generation: Vec<PromptTemplate>,
    crossover: PromptTemplate,
    mutation: PromptTemplate,
    evaluation: PromptTemplate,
    repair: Option<PromptTemplate>,
}

impl TemplateSet {
    pub fn new(
        task: impl Into<String>,
        generation: Vec<PromptTemplate>,
        crossover: PromptTemplate,
        mutation: PromptTemplate,
        evaluation: PromptTemplate,
        repair: Option<PromptTemplate>,
    ) -> Result<Self, TemplateError> {
        if generation.is_empty() {
            return Err(TemplateError::BadSet("at least one generation template is required".into()));
        }
        let slots = generation
            .iter()
            .map(|t| (t, Purpose::Generation))
            .chain([
                (&crossover, Purpose::Crossover),
                (&mutation, Purpose::Mutation),
                (&evaluation, Purpose::Evaluation),
            ])
            .chain(repair.iter().map(|t| (t, Purpose::Repair)));
        for (template, expected) in slots {
            if template.role != expected {
                return Err(TemplateError::BadSet(format!(
                    "template `{}` has role {} but is listed as {}",
                    template.name, template.role, expected
                )));
            }
        }
        Ok(Self { task: task.into(), generation, crossover, mutation, evaluation, repair })
    }

    /// Loads `manifest.json` and the template files it names from `dir`.
    pub fn load_dir(dir: &Path) -> Result<Self, TemplateError> {
        Self::load_with(|file: &str| {
            std::fs::read_to_string(dir.join(file))
                .map_err(|e| TemplateError::BadFile { file: file.to_string(), message: e.to_string() })
        })
    }

    /// Like [`TemplateSet::load_dir`] but reads files through `read`.
    pub fn load_with<F>(read: F) -> Result<Self, TemplateError>
    where
        F: Fn(&str) -> Result<String, TemplateError>,
    {
        let manifest: Manifest = serde_json::from_str(&read("manifest.json")?)
            .map_err(|e| TemplateError::BadFile { file: "manifest.json".into(), message: e.to_string() })?;
        let load = |file: &str| PromptTemplate::parse_file(file, &read(file)?);
        Self::new(
            manifest.task,
            manifest.generation.iter().map(|f| load(f)).collect::<Result<_, _>>()?,
            load(&manifest.crossover)?,
            load(&manifest.mutation)?,
            load(&manifest.evaluation)?,
            manifest.repair.as_deref().map(load).transpose()?,
        )
    }

    /// Round-robin choice so initialization is reproducible.
    pub fn pick_generation_template(&self, index: usize) -> &PromptTemplate {
        &self.generation[index % self.generation.len()]
    }

    pub fn generation(&self) -> &[PromptTemplate] {
        &self.generation
    }

    pub fn crossover(&self) -> &PromptTemplate {
        &self.crossover
    }

    pub fn mutation(&self) -> &PromptTemplate {
        &self.mutation
    }

    pub fn evaluation(&self) -> &PromptTemplate {
        &self.evaluation
    }

    pub fn repair(&self) -> Option<&PromptTemplate> {
        self.repair.as_ref()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bindings(pairs: &[(&'static str, &str)]) -> BTreeMap<&'static str, String> {
        pairs.iter().map(|(k, v)| (*k, v.to_string())).collect()
    }

    #[test]
    fn crossover_prompt_renders_both_parents() {
        let t = PromptTemplate::new(
            "xover",
            Purpose::Crossover,
            "Combine elements of these two itineraries into a new 4-day itinerary, ensuring it stays within the budget.\nA:\n{parent_a}\nB:\n{parent_b}",
        )
        .unwrap();
        let out = t.render(&bindings(&[("parent_a", "PLAN-A"), ("parent_b", "PLAN-B")])).unwrap();
        assert!(out.starts_with("Combine elements of these two itineraries"));
        assert!(out.contains("A:\nPLAN-A\nB:\nPLAN-B"));
    }

    #[test]
    fn body_without_placeholders_is_verbatim() {
        let t = PromptTemplate::new("plain", Purpose::Generation, "Propose a solution.").unwrap();
        assert_eq!(t.render(&BTreeMap::new()).unwrap(), "Propose a solution.");
    }

    #[test]
    fn missing_binding_is_reported() {
        let t = PromptTemplate::new("m", Purpose::Mutation, "{candidate}").unwrap();
        assert_eq!(t.render(&BTreeMap::new()), Err(TemplateError::MissingBinding("candidate".into())));
    }

    #[test]
    fn unknown_placeholder_fails_at_load() {
        let err = PromptTemplate::new("g", Purpose::Generation, "Hello {name}").unwrap_err();
        assert!(matches!(err, TemplateError::UnknownPlaceholder { name, .. } if name == "name"));
    }

    #[test]
    fn mandatory_placeholders_per_role() {
        assert!(PromptTemplate::new("x", Purpose::Crossover, "{parent_a} only").is_err());
        assert!(PromptTemplate::new("m", Purpose::Mutation, "no candidate").is_err());
        assert!(PromptTemplate::new("r", Purpose::Repair, "fix it").is_err());
        assert!(PromptTemplate::new("e", Purpose::Evaluation, "{candidate}").is_err());
        assert!(PromptTemplate::new("e", Purpose::Evaluation, "{candidate} {rubric}").is_ok());
    }

    #[test]
    fn escaped_braces_are_literal() {
        let t = PromptTemplate::new("j", Purpose::Generation, "JSON like {{\"a\": 1}} then {format_spec}").unwrap();
        let out = t.render(&bindings(&[("format_spec", "FMT")])).unwrap();
        assert_eq!(out, "JSON like {\"a\": 1} then FMT");
        assert!(PromptTemplate::new("j", Purpose::Generation, "stray } brace").is_err());
        assert!(PromptTemplate::new("j", Purpose::Generation, "open { brace").is_err());
    }

    #[test]
    fn round_robin_generation_choice() {
        let gen = |i: usize| PromptTemplate::new(format!("g{i}"), Purpose::Generation, format!("variant {i}")).unwrap();
        let set = |n: usize| {
            TemplateSet::new(
                "t",
                (0..n).map(gen).collect(),
                PromptTemplate::new("x", Purpose::Crossover, "{parent_a}{parent_b}").unwrap(),
                PromptTemplate::new("m", Purpose::Mutation, "{candidate}").unwrap(),
                PromptTemplate::new("e", Purpose::Evaluation, "{candidate}{rubric}").unwrap(),
                None,
            )
            .unwrap()
        };
        let three = set(3);
        let picked: Vec<_> = (0..6).map(|i| three.pick_generation_template(i).name().to_string()).collect();
        assert_eq!(picked, ["g0", "g1", "g2", "g0", "g1", "g2"]);
        assert_eq!(set(1).pick_generation_template(41).name(), "g0");
        assert_eq!(set(2).pick_generation_template(7).name(), "g1");
    }

    #[test]
    fn template_file_header() {
        let t = PromptTemplate::parse_file("m.txt", "name: tweak\nrole: mutation\n\nChange one thing:\n{candidate}\n")
            .unwrap();
        assert_eq!(t.name(), "tweak");
        assert_eq!(t.role(), Purpose::Mutation);
        assert_eq!(t.body(), "Change one thing:\n{candidate}\n");
        assert!(PromptTemplate::parse_file("bad.txt", "role: mutation\nname: x\n\n{candidate}").is_err());
        assert!(PromptTemplate::parse_file("bad.txt", "name: x\nrole: mutation\nnot blank\n{candidate}").is_err());
    }

    #[test]
    fn set_rejects_role_mismatch() {
        let g = PromptTemplate::new("g", Purpose::Generation, "go").unwrap();
        let m = PromptTemplate::new("m", Purpose::Mutation, "{candidate}").unwrap();
        let e = PromptTemplate::new("e", Purpose::Evaluation, "{candidate}{rubric}").unwrap();
        let x = PromptTemplate::new("x", Purpose::Crossover, "{parent_a}{parent_b}").unwrap();
        assert!(TemplateSet::new("t", vec![], x.clone(), m.clone(), e.clone(), None).is_err());
        assert!(TemplateSet::new("t", vec![g.clone()], m.clone(), m.clone(), e.clone(), None).is_err());
        assert!(TemplateSet::new("t", vec![g], x, m, e, None).is_ok());
    }
}
