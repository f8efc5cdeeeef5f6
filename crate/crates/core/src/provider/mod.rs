//! Language-model access behind a single completion interface.
//!
//! Three backends exist: [`live::LiveProvider`] speaks the chat-completions
//! HTTP protocol, [`scripted::ScriptedProvider`] answers from a rule table,
//! and [`cassette::ReplayProvider`] answers from a recorded cassette. Wrappers
//! in this module add call metering and an in-flight cap on top of any
//! backend.

pub mod cassette;
pub mod live;
pub mod scripted;

use std::collections::BTreeMap;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Condvar, Mutex};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use cassette::{CassetteEntry, RecordingProvider, ReplayProvider};
pub use live::{HttpReply, HttpTransport, LiveProvider, RetryPolicy, Sleeper};
pub use scripted::{ScriptRule, ScriptedProvider};

/// What a completion is for. Doubles as the role of a prompt template.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Purpose {
    Generation,
    Crossover,
    Mutation,
    Evaluation,
    Repair,
}

impl Purpose {
    pub const ALL: [Purpose; 5] =
        [Purpose::Generation, Purpose::Crossover, Purpose::Mutation, Purpose::Evaluation, Purpose::Repair];

    pub fn as_str(self) -> &'static str {
        match self {
            Purpose::Generation => "generation",
            Purpose::Crossover => "crossover",
            Purpose::Mutation => "mutation",
            Purpose::Evaluation => "evaluation",
            Purpose::Repair => "repair",
        }
    }

    /// Sampling temperature used when the engine issues this kind of call.
    pub fn default_temperature(self) -> f64 {
        match self {
            Purpose::Evaluation => 0.0,
            _ => 0.9,
        }
    }
}

impl fmt::Display for Purpose {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Purpose {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Purpose::ALL.into_iter().find(|p| p.as_str() == s).ok_or_else(|| format!("unknown purpose `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

impl Message {
    pub fn system(content: impl Into<String>) -> Self {
        Self { role: Role::System, content: content.into() }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self { role: Role::User, content: content.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub messages: Vec<Message>,
    pub temperature: f64,
    pub max_output_tokens: u32,
    pub purpose: Purpose,
}

impl CompletionRequest {
    pub fn new(purpose: Purpose, messages: Vec<Message>, max_output_tokens: u32) -> Self {
        Self { messages, temperature: purpose.default_temperature(), max_output_tokens, purpose }
    }

    pub fn validate(&self) -> Result<(), ProviderError> {
        if self.messages.is_empty() {
            return Err(ProviderError::InvalidRequest("request has no messages".into()));
        }
        if self.messages.iter().any(|m| m.content.is_empty()) {
            return Err(ProviderError::InvalidRequest("message content is empty".into()));
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(ProviderError::InvalidRequest(format!("temperature {} outside [0, 2]", self.temperature)));
        }
        if self.max_output_tokens == 0 {
            return Err(ProviderError::InvalidRequest("max_output_tokens must be positive".into()));
        }
        Ok(())
    }

    /// Stable digest over messages, temperature and purpose.
    pub fn digest(&self) -> String {
        #[derive(Serialize)]
        struct Keyed<'a> {
            messages: &'a [Message],
            temperature: f64,
            purpose: Purpose,
        }
        let canonical = serde_json::to_vec(&Keyed {
            messages: &self.messages,
            temperature: self.temperature,
            purpose: self.purpose,
        })
        .expect("request serializes");
        hex::encode(Sha256::digest(&canonical))
    }

    /// All message contents joined, for pattern matching.
    pub fn joined_content(&self) -> String {
        self.messages.iter().map(|m| m.content.as_str()).collect::<Vec<_>>().join("\n")
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub input_tokens: u64,
    pub output_tokens: u64,
}

impl std::ops::AddAssign for Usage {
    fn add_assign(&mut self, rhs: Self) {
        self.input_tokens += rhs.input_tokens;
        self.output_tokens += rhs.output_tokens;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Live,
    Scripted,
    Replay,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionResponse {
    pub text: String,
    pub usage: Usage,
    pub latency_ms: u64,
    pub backend: BackendKind,
    /// HTTP attempts spent, 1 for offline backends.
    pub attempts: u32,
}

/// Rough whitespace token count used by the offline backends.
pub(crate) fn estimate_tokens(text: &str) -> u64 {
    text.split_whitespace().count() as u64
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ProviderError {
    #[error("request timed out after {attempts} attempt(s)")]
    Timeout { attempts: u32 },
    #[error("transport failure after {attempts} attempt(s): {message}")]
    TransportFailure { attempts: u32, message: String },
    #[error("rate limited after {attempts} attempt(s)")]
    RateLimited { attempts: u32 },
    #[error("malformed provider reply: {0}")]
    MalformedProviderReply(String),
    #[error("no cassette entry for request digest {digest} ({purpose})")]
    ReplayMiss { digest: String, purpose: Purpose },
    #[error("no scripted rule matches a {purpose} request")]
    ScriptMiss { purpose: Purpose },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("provider configuration error: {0}")]
    Config(String),
    #[error("cassette storage failure: {0}")]
    Storage(String),
}

/// A language-model backend.
pub trait Provider: Send + Sync {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, ProviderError>;

    fn backend(&self) -> BackendKind;
}

impl<P: Provider + ?Sized> Provider for &P {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, ProviderError> {
        (**self).complete(request)
    }

    fn backend(&self) -> BackendKind {
        (**self).backend()
    }
}

impl<P: Provider + ?Sized> Provider for Box<P> {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, ProviderError> {
        (**self).complete(request)
    }

    fn backend(&self) -> BackendKind {
        (**self).backend()
    }
}

/// Counts every call that reaches the wrapped provider, per purpose.
pub struct Metered<P> {
    inner: P,
    counts: [AtomicU64; 5],
}

impl<P: Provider> Metered<P> {
    pub fn new(inner: P) -> Self {
        Self { inner, counts: Default::default() }
    }

    pub fn calls(&self, purpose: Purpose) -> u64 {
        self.counts[purpose as usize].load(Ordering::SeqCst)
    }

    pub fn total_calls(&self) -> u64 {
        self.counts.iter().map(|c| c.load(Ordering::SeqCst)).sum()
    }

    pub fn by_purpose(&self) -> BTreeMap<Purpose, u64> {
        Purpose::ALL.into_iter().map(|p| (p, self.calls(p))).collect()
    }

    pub fn into_inner(self) -> P {
        self.inner
    }
}

impl<P: Provider> Provider for Metered<P> {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, ProviderError> {
        self.counts[request.purpose as usize].fetch_add(1, Ordering::SeqCst);
        self.inner.complete(request)
    }

    fn backend(&self) -> BackendKind {
        self.inner.backend()
    }
}

/// Caps the number of concurrent requests in flight to the wrapped provider.
pub struct InFlightLimit<P> {
    inner: P,
    limit: usize,
    active: Mutex<usize>,
    freed: Condvar,
    peak: AtomicU64,
}

impl<P: Provider> InFlightLimit<P> {
    pub fn new(inner: P, limit: usize) -> Self {
        Self { inner, limit: limit.max(1), active: Mutex::new(0), freed: Condvar::new(), peak: AtomicU64::new(0) }
    }

    /// Highest number of simultaneous requests observed.
    pub fn peak(&self) -> u64 {
        self.peak.load(Ordering::SeqCst)
    }
}

impl<P: Provider> Provider for InFlightLimit<P> {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, ProviderError> {
        {
            let mut active = self.active.lock().expect("in-flight lock poisoned");
            while *active >= self.limit {
                active = self.freed.wait(active).expect("in-flight lock poisoned");
            }
            *active += 1;
            self.peak.fetch_max(*active as u64, Ordering::SeqCst);
        }
        let result = self.inner.complete(request);
        *self.active.lock().expect("in-flight lock poisoned") -= 1;
        self.freed.notify_one();
        result
    }

    fn backend(&self) -> BackendKind {
        self.inner.backend()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn request(purpose: Purpose, text: &str) -> CompletionRequest {
        CompletionRequest::new(purpose, vec![Message::user(text)], 256)
    }

    #[test]
    fn digest_ignores_max_tokens_but_not_temperature() {
        let a = request(Purpose::Evaluation, "rate this");
        let mut b = a.clone();
        b.max_output_tokens = 10;
        assert_eq!(a.digest(), b.digest());
        b.temperature = 0.5;
        assert_ne!(a.digest(), b.digest());
        let c = request(Purpose::Mutation, "rate this");
        assert_ne!(a.digest(), c.digest());
    }

    #[test]
    fn default_temperatures() {
        assert_eq!(Purpose::Evaluation.default_temperature(), 0.0);
        assert_eq!(Purpose::Generation.default_temperature(), 0.9);
        assert_eq!(Purpose::Crossover.default_temperature(), 0.9);
        assert_eq!(Purpose::Mutation.default_temperature(), 0.9);
    }

    #[test]
    fn request_validation() {
        assert!(request(Purpose::Generation, "x").validate().is_ok());
        assert!(request(Purpose::Generation, "").validate().is_err());
        let mut r = request(Purpose::Generation, "x");
        r.messages.clear();
        assert!(r.validate().is_err());
        let mut r = request(Purpose::Generation, "x");
        r.temperature = 2.5;
        assert!(r.validate().is_err());
    }

    #[test]
    fn metered_counts_per_purpose() {
        let scripted = ScriptedProvider::new(vec![ScriptRule::reply(None, None, "ok")]);
        let metered = Metered::new(scripted);
        metered.complete(&request(Purpose::Generation, "a")).unwrap();
        metered.complete(&request(Purpose::Evaluation, "b")).unwrap();
        metered.complete(&request(Purpose::Evaluation, "c")).unwrap();
        assert_eq!(metered.calls(Purpose::Evaluation), 2);
        assert_eq!(metered.total_calls(), 3);
    }

    #[test]
    fn in_flight_limit_is_respected() {
        let slow = ScriptedProvider::new(vec![ScriptRule::handler(None, None, |_, _| {
            std::thread::sleep(std::time::Duration::from_millis(20));
            "ok".to_string()
        })]);
        let limited = InFlightLimit::new(slow, 2);
        std::thread::scope(|s| {
            for i in 0..6 {
                let limited = &limited;
                s.spawn(move || limited.complete(&request(Purpose::Generation, &format!("q{i}"))).unwrap());
            }
        });
        assert!(limited.peak() <= 2);
        assert!(limited.peak() >= 1);
    }
}
