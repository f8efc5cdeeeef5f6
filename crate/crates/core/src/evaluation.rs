//! Fitness scoring and constraint validation.
//!
//! Constraints are plain Rust checks run before any model call. Scores come
//! from the model's reply to the evaluation prompt: the last `SCORE: <x>`
//! line, or failing that the first standalone number in `[1, 10]`.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::gene::{to_text, Gene};
use crate::provider::{CompletionRequest, Provider, ProviderError, Purpose, Usage};
use crate::tasks::TaskDef;
use crate::templating::TemplateError;

pub const MIN_SCORE: f64 = 1.0;
pub const MAX_SCORE: f64 = 10.0;

/// Default penalty (rubric points) for a hard violation in penalty mode.
pub const DEFAULT_HARD_PENALTY: f64 = 2.0;
/// Default penalty (rubric points) for a soft violation.
pub const DEFAULT_SOFT_PENALTY: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Hard,
    Soft,
}

impl Severity {
    pub fn default_penalty(self) -> f64 {
        match self {
            Severity::Hard => DEFAULT_HARD_PENALTY,
            Severity::Soft => DEFAULT_SOFT_PENALTY,
        }
    }
}

impl fmt::Display for Severity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Severity::Hard => "hard",
            Severity::Soft => "soft",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintViolation {
    pub constraint_id: String,
    pub severity: Severity,
    pub message: String,
    pub measured: Option<f64>,
    pub limit: Option<f64>,
    /// Rubric points subtracted from the raw score.
    pub penalty: f64,
}

/// A programmatic rule a gene must (hard) or should (soft) satisfy.
pub trait ConstraintSpec<G>: Send + Sync {
    fn id(&self) -> &str;

    fn severity(&self) -> Severity;

    /// Human-readable rule, rendered into `{constraints}`.
    fn description(&self) -> String;

    fn check(&self, gene: &G) -> Vec<ConstraintViolation>;
}

impl<G> fmt::Debug for dyn ConstraintSpec<G> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ConstraintSpec({}, {})", self.id(), self.severity())
    }
}

/// Runs every check in registration order and concatenates the violations.
pub fn validate<G>(gene: &G, constraints: &[Box<dyn ConstraintSpec<G>>]) -> Vec<ConstraintViolation> {
    constraints.iter().flat_map(|c| c.check(gene)).collect()
}

/// Bullet list of constraint descriptions for prompts.
pub fn describe_constraints<G>(constraints: &[Box<dyn ConstraintSpec<G>>]) -> String {
    constraints.iter().map(|c| format!("- ({}) {}", c.severity(), c.description())).collect::<Vec<_>>().join("\n")
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConstraintMode {
    /// Hard violations are filtered out without scoring.
    #[default]
    Filter,
    /// Hard violations are scored and penalized.
    Penalty,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    #[default]
    Mean,
    Median,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub samples: u32,
    pub mode: ConstraintMode,
    pub aggregation: Aggregation,
    pub temperature: f64,
    pub max_output_tokens: u32,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            samples: 1,
            mode: ConstraintMode::Filter,
            aggregation: Aggregation::Mean,
            temperature: Purpose::Evaluation.default_temperature(),
            max_output_tokens: 512,
        }
    }
}

/// Effective fitness: a normalized score, or removed from selection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Effective {
    Score(f64),
    Filtered,
}

impl Effective {
    pub fn score(self) -> Option<f64> {
        match self {
            Effective::Score(s) => Some(s),
            Effective::Filtered => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitnessReport {
    /// Aggregated model score in `[1, 10]`; absent when filtered.
    pub raw_score: Option<f64>,
    /// `(raw - 1) / 9`.
    pub normalized: Option<f64>,
    pub explanation: String,
    pub samples_used: u32,
    pub violations: Vec<ConstraintViolation>,
    /// Raw score after penalties, floored at 1.
    pub penalized_raw: Option<f64>,
    pub effective: Effective,
}

impl FitnessReport {
    pub fn filtered(violations: Vec<ConstraintViolation>) -> Self {
        Self {
            raw_score: None,
            normalized: None,
            explanation: String::new(),
            samples_used: 0,
            violations,
            penalized_raw: None,
            effective: Effective::Filtered,
        }
    }
}

pub fn normalize(raw: f64) -> f64 {
    (raw - MIN_SCORE) / (MAX_SCORE - MIN_SCORE)
}

/// Applies the configured mode to a raw score and its violations.
pub fn score_report(
    raw: f64,
    explanation: String,
    samples_used: u32,
    mut violations: Vec<ConstraintViolation>,
    mode: ConstraintMode,
) -> FitnessReport {
    let has_hard = violations.iter().any(|v| v.severity == Severity::Hard);
    if mode == ConstraintMode::Filter && has_hard {
        for v in violations.iter_mut().filter(|v| v.severity == Severity::Hard) {
            v.penalty = 0.0;
        }
        return FitnessReport::filtered(violations);
    }
    let raw = raw.clamp(MIN_SCORE, MAX_SCORE);
    let total_penalty: f64 = violations.iter().map(|v| v.penalty.max(0.0)).sum();
    let penalized = (raw - total_penalty).max(MIN_SCORE);
    FitnessReport {
        raw_score: Some(raw),
        normalized: Some(normalize(raw)),
        explanation,
        samples_used,
        violations,
        penalized_raw: Some(penalized),
        effective: Effective::Score(normalize(penalized)),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("no usable score in model reply")]
pub struct ScoreParseFailure;

fn parse_score_line(line: &str) -> Option<Option<f64>> {
    let trimmed =
        line.trim().trim_start_matches(|c: char| matches!(c, '*' | '#' | '>' | '-' | '_' | '`') || c.is_whitespace());
    let lower = trimmed.get(..5)?;
    if !lower.eq_ignore_ascii_case("score") {
        return None;
    }
    let rest = trimmed[5..].trim_start_matches(|c: char| c == '*' || c == '_' || c.is_whitespace());
    let rest = rest.strip_prefix(':')?;
    let rest = rest.trim_start_matches(|c: char| c == '*' || c == '_' || c.is_whitespace());
    let number: String = rest
        .char_indices()
        .take_while(|(i, c)| c.is_ascii_digit() || (*c == '.' && *i > 0) || (*c == '-' && *i == 0))
        .map(|(_, c)| c)
        .collect();
    let number = number.trim_end_matches('.');
    Some(number.parse::<f64>().ok())
}

/// Standalone decimal numbers: not glued to letters, digits, `-` or `.`.
fn standalone_numbers(text: &str) -> impl Iterator<Item = f64> + '_ {
    let bytes = text.as_bytes();
    let mut i = 0;
    std::iter::from_fn(move || {
        while i < bytes.len() {
            if !bytes[i].is_ascii_digit() {
                i += 1;
                continue;
            }
            let start = i;
            while i < bytes.len() && bytes[i].is_ascii_digit() {
                i += 1;
            }
            if i + 1 < bytes.len() && bytes[i] == b'.' && bytes[i + 1].is_ascii_digit() {
                i += 1;
                while i < bytes.len() && bytes[i].is_ascii_digit() {
                    i += 1;
                }
            }
            let before_ok = start == 0 || {
                let b = bytes[start - 1];
                !(b.is_ascii_alphanumeric() || b == b'_' || b == b'-' || b == b'.')
            };
            let after_ok = i == bytes.len() || {
                let b = bytes[i];
                !(b.is_ascii_alphanumeric() || b == b'_')
                    && !(b == b'.' && i + 1 < bytes.len() && bytes[i + 1].is_ascii_digit())
            };
            // Non-ASCII letters adjacent to the digits also disqualify.
            let before_char_ok = text[..start].chars().next_back().is_none_or(|c| !c.is_alphanumeric());
            let after_char_ok = text[i..].chars().next().is_none_or(|c| !c.is_alphanumeric());
            if before_ok && after_ok && before_char_ok && after_char_ok {
                if let Ok(v) = text[start..i].parse::<f64>() {
                    return Some(v);
                }
            }
        }
        None
    })
}

/// Pulls a rubric score in `[1, 10]` out of a model reply.
pub fn extract_score(text: &str) -> Result<f64, ScoreParseFailure> {
    // A SCORE line without a number does not count as one.
    if let Some(value) = text.lines().filter_map(parse_score_line).flatten().last() {
        if value > 0.0 && value < 11.0 {
            return Ok(value.clamp(MIN_SCORE, MAX_SCORE));
        }
        return Err(ScoreParseFailure);
    }
    standalone_numbers(text).find(|v| (MIN_SCORE..=MAX_SCORE).contains(v)).ok_or(ScoreParseFailure)
}

/// The reply with any `SCORE:` lines removed.
pub fn extract_explanation(text: &str) -> String {
    text.lines().filter(|l| parse_score_line(l).is_none()).collect::<Vec<_>>().join("\n").trim().to_string()
}

/// Renders the evaluation prompt for a gene.
pub fn build_score_prompt<G: Gene>(gene: &G, task: &TaskDef<G>) -> Result<String, TemplateError> {
    let mut bindings = task.base_bindings();
    bindings.insert("candidate", to_text(gene));
    bindings.insert("rubric", task.rubric.clone());
    task.templates.evaluation().render(&bindings)
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EvaluationError {
    #[error("{failed} of {samples} evaluation samples yielded no score")]
    Unscorable { failed: u32, samples: u32, calls: u32 },
    #[error("provider failed during evaluation: {error}")]
    Provider { error: ProviderError, calls: u32 },
    #[error(transparent)]
    Template(#[from] TemplateError),
}

impl EvaluationError {
    /// Provider calls spent before the failure.
    pub fn calls(&self) -> u32 {
        match self {
            EvaluationError::Unscorable { calls, .. } | EvaluationError::Provider { calls, .. } => *calls,
            EvaluationError::Template(_) => 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub report: FitnessReport,
    pub calls: u32,
    pub usage: Usage,
}

fn aggregate(scores: &mut [f64], how: Aggregation) -> f64 {
    match how {
        Aggregation::Mean => scores.iter().sum::<f64>() / scores.len() as f64,
        Aggregation::Median => {
            scores.sort_by(f64::total_cmp);
            let mid = scores.len() / 2;
            if scores.len().is_multiple_of(2) {
                (scores[mid - 1] + scores[mid]) / 2.0
            } else {
                scores[mid]
            }
        }
    }
}

/// Validates, then (unless filtered) scores a gene with `settings.samples`
/// evaluation calls. A sample whose reply has no score is retried once.
pub fn evaluate<G: Gene, P: Provider + ?Sized>(
    gene: &G,
    task: &TaskDef<G>,
    settings: &EvalSettings,
    provider: &P,
) -> Result<Evaluation, EvaluationError> {
    let violations = validate(gene, &task.constraints);
    if settings.mode == ConstraintMode::Filter && violations.iter().any(|v| v.severity == Severity::Hard) {
        let report = score_report(MIN_SCORE, String::new(), 0, violations, settings.mode);
        return Ok(Evaluation { report, calls: 0, usage: Usage::default() });
    }

    let prompt = build_score_prompt(gene, task)?;
    let mut request = CompletionRequest::new(Purpose::Evaluation, task.messages(prompt), settings.max_output_tokens);
    request.temperature = settings.temperature;

    let samples = settings.samples.max(1);
    let mut calls = 0;
    let mut usage = Usage::default();
    let mut scores = Vec::with_capacity(samples as usize);
    let mut explanation = None;
    let mut failed = 0;
    for _ in 0..samples {
        let mut got = None;
        for _attempt in 0..2 {
            calls += 1;
            let reply = provider.complete(&request).map_err(|error| EvaluationError::Provider { error, calls })?;
            usage += reply.usage;
            if let Ok(score) = extract_score(&reply.text) {
                got = Some(score);
                explanation.get_or_insert_with(|| extract_explanation(&reply.text));
                break;
            }
        }
        match got {
            Some(score) => scores.push(score),
            None => failed += 1,
        }
    }
    if failed > samples / 2 || scores.is_empty() {
        return Err(EvaluationError::Unscorable { failed, samples, calls });
    }
    let used = scores.len() as u32;
    let raw = aggregate(&mut scores, settings.aggregation);
    let report = score_report(raw, explanation.unwrap_or_default(), used, violations, settings.mode);
    Ok(Evaluation { report, calls, usage })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn violation(severity: Severity, penalty: f64) -> ConstraintViolation {
        ConstraintViolation {
            constraint_id: "c".into(),
            severity,
            message: "m".into(),
            measured: None,
            limit: None,
            penalty,
        }
    }

    #[test]
    fn score_line_examples() {
        assert_eq!(extract_score("well balanced.\nSCORE: 9"), Ok(9.0));
        assert_eq!(extract_score("I'd give this a 7 out of 10 overall."), Ok(7.0));
        assert_eq!(extract_score("excellent work, no issues."), Err(ScoreParseFailure));
    }

    #[test]
    fn last_score_line_wins_and_trailing_text_is_ignored() {
        assert_eq!(extract_score("SCORE: 3\nrevised...\nSCORE: 8 — better"), Ok(8.0));
        assert_eq!(extract_score("SCORE: 9 — under budget, balanced days"), Ok(9.0));
    }

    #[test]
    fn clamp_and_reject() {
        assert_eq!(extract_score("SCORE: 10.5"), Ok(10.0));
        assert_eq!(extract_score("SCORE: 0.5"), Ok(1.0));
        assert_eq!(extract_score("SCORE: 11"), Err(ScoreParseFailure));
        assert_eq!(extract_score("SCORE: 0"), Err(ScoreParseFailure));
        assert_eq!(extract_score("SCORE: -3"), Err(ScoreParseFailure));
        assert_eq!(extract_score("SCORE: high"), Err(ScoreParseFailure));
        assert_eq!(extract_score("SCORE: 7\nSCORE: n/a"), Ok(7.0));
        assert_eq!(extract_score("Worth an 8.\nSCORE: excellent"), Ok(8.0));
    }

    #[test]
    fn fallback_skips_out_of_range_and_glued_numbers() {
        assert_eq!(extract_score("Costs ¥4890 total; I rate it 8."), Ok(8.0));
        assert_eq!(extract_score("day2 looks thin, overall 6.5/10"), Ok(6.5));
        assert_eq!(extract_score("trend -3 then 0 then 12"), Err(ScoreParseFailure));
    }

    #[test]
    fn mean_of_three_samples() {
        // Independent oracle: (8 + 9 + 9) / 3.
        let mut s = [8.0, 9.0, 9.0];
        let raw = aggregate(&mut s, Aggregation::Mean);
        let expected_raw = 26.0 / 3.0;
        assert!((raw - expected_raw).abs() < 1e-12);
        let report = score_report(raw, String::new(), 3, vec![], ConstraintMode::Filter);
        assert!((report.normalized.unwrap() - (expected_raw - 1.0) / 9.0).abs() < 1e-12);
        assert!((report.normalized.unwrap() - 0.852).abs() < 5e-4);
        assert_eq!(report.effective, Effective::Score(report.normalized.unwrap()));
    }

    #[test]
    fn median_aggregation() {
        assert_eq!(aggregate(&mut [9.0, 2.0, 8.0], Aggregation::Median), 8.0);
        assert_eq!(aggregate(&mut [9.0, 2.0, 8.0, 3.0], Aggregation::Median), 5.5);
    }

    #[test]
    fn penalty_arithmetic() {
        let report = score_report(9.0, String::new(), 1, vec![violation(Severity::Soft, 2.0)], ConstraintMode::Penalty);
        assert_eq!(report.penalized_raw, Some(7.0));
        let eff = report.effective.score().unwrap();
        assert!((eff - 6.0 / 9.0).abs() < 1e-12);
        assert!((eff - 0.667).abs() < 5e-4);
        assert!(eff <= report.normalized.unwrap());
    }

    #[test]
    fn penalties_floor_at_one() {
        let vs = vec![violation(Severity::Hard, 2.0), violation(Severity::Hard, 2.0), violation(Severity::Soft, 9.0)];
        let report = score_report(4.0, String::new(), 1, vs, ConstraintMode::Penalty);
        assert_eq!(report.penalized_raw, Some(1.0));
        assert_eq!(report.effective, Effective::Score(0.0));
    }

    #[test]
    fn filter_mode_hard_violation_is_sentinel_with_zero_penalty() {
        let report = score_report(9.0, String::new(), 1, vec![violation(Severity::Hard, 2.0)], ConstraintMode::Filter);
        assert_eq!(report.effective, Effective::Filtered);
        assert_eq!(report.violations[0].penalty, 0.0);
        // Soft violations in filter mode are still penalized.
        let soft = score_report(9.0, String::new(), 1, vec![violation(Severity::Soft, 0.5)], ConstraintMode::Filter);
        assert_eq!(soft.penalized_raw, Some(8.5));
    }

    #[test]
    fn explanation_drops_score_line() {
        assert_eq!(extract_explanation("Nice pacing.\nSCORE: 8"), "Nice pacing.");
    }
}
