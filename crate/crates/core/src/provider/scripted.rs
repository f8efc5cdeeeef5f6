//! Deterministic rule-table backend.
//!
//! Rules are tried in order; the first whose purpose and pattern both match
//! produces the reply. A request no rule matches is an error. Any randomness
//! a rule uses is seeded from the request digest, so identical requests get
//! identical replies regardless of call order or thread.

use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::Deserialize;

use super::{
    estimate_tokens, BackendKind, CompletionRequest, CompletionResponse, Provider, ProviderError, Purpose, Usage,
};

/// Computes a reply from the request and a request-seeded generator.
pub type ReplyFn = dyn Fn(&CompletionRequest, &mut ChaCha8Rng) -> String + Send + Sync;

#[derive(Clone)]
enum Action {
    /// Literal reply; `{rand:LO..HI}` tokens become seeded integers in `LO..=HI`.
    Template(String),
    Handler(Arc<ReplyFn>),
}

#[derive(Clone)]
pub struct ScriptRule {
    purpose: Option<Purpose>,
    pattern: Option<Regex>,
    action: Action,
}

impl ScriptRule {
    pub fn reply(purpose: Option<Purpose>, pattern: Option<Regex>, template: impl Into<String>) -> Self {
        Self { purpose, pattern, action: Action::Template(template.into()) }
    }

    pub fn handler<F>(purpose: Option<Purpose>, pattern: Option<Regex>, f: F) -> Self
    where
        F: Fn(&CompletionRequest, &mut ChaCha8Rng) -> String + Send + Sync + 'static,
    {
        Self { purpose, pattern, action: Action::Handler(Arc::new(f)) }
    }

    fn matches(&self, request: &CompletionRequest, content: &str) -> bool {
        self.purpose.is_none_or(|p| p == request.purpose) && self.pattern.as_ref().is_none_or(|re| re.is_match(content))
    }
}

impl std::fmt::Debug for ScriptRule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ScriptRule")
            .field("purpose", &self.purpose)
            .field("pattern", &self.pattern.as_ref().map(Regex::as_str))
            .field("handler", &matches!(self.action, Action::Handler(_)))
            .finish()
    }
}

/// One entry of a JSON rule file.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RuleSpec {
    #[serde(default)]
    purpose: Option<Purpose>,
    #[serde(default)]
    pattern: Option<String>,
    reply: String,
}

#[derive(Debug, Clone, Default)]
pub struct ScriptedProvider {
    rules: Vec<ScriptRule>,
    seed: u64,
}

impl ScriptedProvider {
    pub fn new(rules: Vec<ScriptRule>) -> Self {
        Self { rules, seed: 0 }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Rules from `self` are tried before rules from `fallback`.
    pub fn then(mut self, fallback: ScriptedProvider) -> Self {
        self.rules.extend(fallback.rules);
        self
    }

    /// Loads rules from a JSON array of `{purpose?, pattern?, reply}` objects.
    pub fn from_json(text: &str) -> Result<Self, ProviderError> {
        let specs: Vec<RuleSpec> =
            serde_json::from_str(text).map_err(|e| ProviderError::Config(format!("scripted rules: {e}")))?;
        let rules = specs
            .into_iter()
            .map(|spec| {
                let pattern = spec
                    .pattern
                    .map(|p| Regex::new(&p).map_err(|e| ProviderError::Config(format!("rule pattern `{p}`: {e}"))))
                    .transpose()?;
                Ok(ScriptRule::reply(spec.purpose, pattern, spec.reply))
            })
            .collect::<Result<Vec<_>, ProviderError>>()?;
        Ok(Self::new(rules))
    }

    pub fn from_file(path: &Path) -> Result<Self, ProviderError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ProviderError::Config(format!("reading {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    fn rng_for(&self, request: &CompletionRequest) -> ChaCha8Rng {
        let digest = request.digest();
        let mut key = [0u8; 8];
        hex::decode_to_slice(&digest[..16], &mut key).expect("digest is hex");
        ChaCha8Rng::seed_from_u64(u64::from_le_bytes(key) ^ self.seed)
    }
}

fn expand_template(template: &str, rng: &mut ChaCha8Rng) -> String {
    let token = Regex::new(r"\{rand:(-?\d+)\.\.(-?\d+)\}").expect("static regex");
    token
        .replace_all(template, |caps: &regex::Captures<'_>| {
            let lo: i64 = caps[1].parse().unwrap_or(0);
            let hi: i64 = caps[2].parse().unwrap_or(lo);
            let (lo, hi) = if lo <= hi { (lo, hi) } else { (hi, lo) };
            rng.gen_range(lo..=hi).to_string()
        })
        .into_owned()
}

impl Provider for ScriptedProvider {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, ProviderError> {
        request.validate()?;
        let started = Instant::now();
        let content = request.joined_content();
        let rule = self
            .rules
            .iter()
            .find(|r| r.matches(request, &content))
            .ok_or(ProviderError::ScriptMiss { purpose: request.purpose })?;
        let mut rng = self.rng_for(request);
        let text = match &rule.action {
            Action::Template(t) => expand_template(t, &mut rng),
            Action::Handler(f) => f(request, &mut rng),
        };
        Ok(CompletionResponse {
            usage: Usage { input_tokens: estimate_tokens(&content), output_tokens: estimate_tokens(&text) },
            text,
            latency_ms: started.elapsed().as_millis() as u64,
            backend: BackendKind::Scripted,
            attempts: 1,
        })
    }

    fn backend(&self) -> BackendKind {
        BackendKind::Scripted
    }
}
