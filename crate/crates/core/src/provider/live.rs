//! HTTP chat-completions backend with retry and seeded backoff jitter.

use std::fmt;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{BackendKind, CompletionRequest, CompletionResponse, Provider, ProviderError, Role, Usage};

/// Bound on the multiplicative jitter applied to each backoff delay.
pub const JITTER_FRACTION: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_backoff_ms: u64,
    pub backoff_multiplier: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { max_attempts: 3, base_backoff_ms: 500, backoff_multiplier: 2.0 }
    }
}

impl RetryPolicy {
    /// Nominal delay before retry number `retry` (1-based), without jitter.
    pub fn nominal_delay_ms(&self, retry: u32) -> f64 {
        self.base_backoff_ms as f64 * self.backoff_multiplier.powi(retry as i32 - 1)
    }

    /// Delay with a jitter factor `unit` drawn from `[-1, 1]`.
    pub fn jittered_delay(&self, retry: u32, unit: f64) -> Duration {
        let factor = 1.0 + JITTER_FRACTION * unit.clamp(-1.0, 1.0);
        Duration::from_secs_f64((self.nominal_delay_ms(retry) * factor).max(0.0) / 1000.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HttpReply {
    pub status: u16,
    pub body: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TransportError {
    Timeout,
    Io(String),
}

/// Minimal POST-JSON transport so tests can fake the network.
pub trait HttpTransport: Send + Sync {
    fn post_json(&self, url: &str, bearer: &str, body: &str, timeout: Duration) -> Result<HttpReply, TransportError>;
}

pub trait Sleeper: Send + Sync {
    fn sleep(&self, duration: Duration);
}

pub struct ThreadSleeper;

impl Sleeper for ThreadSleeper {
    fn sleep(&self, duration: Duration) {
        std::thread::sleep(duration);
    }
}

pub struct ReqwestTransport {
    client: reqwest::blocking::Client,
}

impl ReqwestTransport {
    pub fn new() -> Result<Self, ProviderError> {
        let client = reqwest::blocking::Client::builder()
            .build()
            .map_err(|e| ProviderError::Config(format!("http client: {e}")))?;
        Ok(Self { client })
    }
}

impl HttpTransport for ReqwestTransport {
    fn post_json(&self, url: &str, bearer: &str, body: &str, timeout: Duration) -> Result<HttpReply, TransportError> {
        let response = self
            .client
            .post(url)
            .timeout(timeout)
            .bearer_auth(bearer)
            .header("content-type", "application/json")
            .body(body.to_string())
            .send()
            .map_err(|e| {
                if e.is_timeout() {
                    TransportError::Timeout
                } else {
                    TransportError::Io(e.without_url().to_string())
                }
            })?;
        let status = response.status().as_u16();
        let body = response.text().map_err(|e| TransportError::Io(e.without_url().to_string()))?;
        Ok(HttpReply { status, body })
    }
}

/// Bearer token read from the environment. Never printed.
#[derive(Clone)]
pub struct AuthToken(String);

impl AuthToken {
    pub fn from_env(var: &str) -> Result<Self, ProviderError> {
        match std::env::var(var) {
            Ok(v) if !v.is_empty() => Ok(Self(v)),
            _ => Err(ProviderError::Config(format!("environment variable {var} is not set"))),
        }
    }

    pub fn new(value: impl Into<String>) -> Self {
        Self(value.into())
    }
}

impl fmt::Debug for AuthToken {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("AuthToken(<redacted>)")
    }
}

pub struct LiveProvider {
    endpoint: String,
    model: String,
    token: AuthToken,
    timeout: Duration,
    retry: RetryPolicy,
    transport: Box<dyn HttpTransport>,
    sleeper: Box<dyn Sleeper>,
    jitter: Mutex<ChaCha8Rng>,
}

impl fmt::Debug for LiveProvider {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("LiveProvider")
            .field("endpoint", &self.endpoint)
            .field("model", &self.model)
            .field("token", &self.token)
            .field("retry", &self.retry)
            .finish()
    }
}

enum Attempt {
    Done(CompletionResponse),
    Retry(ProviderError),
    Fatal(ProviderError),
}

impl LiveProvider {
    pub fn new(
        endpoint: impl Into<String>,
        model: impl Into<String>,
        token: AuthToken,
        timeout: Duration,
        retry: RetryPolicy,
        seed: u64,
    ) -> Result<Self, ProviderError> {
        Ok(Self::with_transport(endpoint, model, token, timeout, retry, seed, Box::new(ReqwestTransport::new()?)))
    }

    pub fn with_transport(
        endpoint: impl Into<String>,
        model: impl Into<String>,
        token: AuthToken,
        timeout: Duration,
        retry: RetryPolicy,
        seed: u64,
        transport: Box<dyn HttpTransport>,
    ) -> Self {
        Self {
            endpoint: endpoint.into(),
            model: model.into(),
            token,
            timeout,
            retry,
            transport,
            sleeper: Box::new(ThreadSleeper),
            jitter: Mutex::new(ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    pub fn with_sleeper(mut self, sleeper: Box<dyn Sleeper>) -> Self {
        self.sleeper = sleeper;
        self
    }

    fn body(&self, request: &CompletionRequest) -> String {
        let messages: Vec<_> = request
            .messages
            .iter()
            .map(|m| {
                let role = match m.role {
                    Role::System => "system",
                    Role::User => "user",
                };
                json!({ "role": role, "content": m.content })
            })
            .collect();
        json!({
            "model": self.model,
            "messages": messages,
            "temperature": request.temperature,
            "max_tokens": request.max_output_tokens,
        })
        .to_string()
    }

    fn attempt(&self, body: &str, attempts: u32, started: Instant) -> Attempt {
        match self.transport.post_json(&self.endpoint, &self.token.0, body, self.timeout) {
            Err(TransportError::Timeout) => Attempt::Retry(ProviderError::Timeout { attempts }),
            Err(TransportError::Io(message)) => Attempt::Retry(ProviderError::TransportFailure { attempts, message }),
            Ok(reply) => match reply.status {
                200..=299 => match parse_chat_reply(&reply.body) {
                    Ok((text, usage)) => Attempt::Done(CompletionResponse {
                        text,
                        usage,
                        latency_ms: started.elapsed().as_millis() as u64,
                        backend: BackendKind::Live,
                        attempts,
                    }),
                    Err(e) => Attempt::Fatal(e),
                },
                429 => Attempt::Retry(ProviderError::RateLimited { attempts }),
                408 => Attempt::Retry(ProviderError::Timeout { attempts }),
                500..=599 => Attempt::Retry(ProviderError::TransportFailure {
                    attempts,
                    message: format!("server returned HTTP {}", reply.status),
                }),
                status => Attempt::Fatal(ProviderError::TransportFailure {
                    attempts,
                    message: format!("endpoint rejected request with HTTP {status}"),
                }),
            },
        }
    }
}

fn parse_chat_reply(body: &str) -> Result<(String, Usage), ProviderError> {
    let value: serde_json::Value =
        serde_json::from_str(body).map_err(|e| ProviderError::MalformedProviderReply(format!("invalid JSON: {e}")))?;
    let text = value
        .pointer("/choices/0/message/content")
        .and_then(|v| v.as_str())
        .ok_or_else(|| ProviderError::MalformedProviderReply("missing choices[0].message.content".into()))?;
    if text.is_empty() {
        return Err(ProviderError::MalformedProviderReply("empty completion text".into()));
    }
    let tokens = |key: &str| value.pointer(&format!("/usage/{key}")).and_then(|v| v.as_u64()).unwrap_or(0);
    Ok((text.to_string(), Usage { input_tokens: tokens("prompt_tokens"), output_tokens: tokens("completion_tokens") }))
}

impl Provider for LiveProvider {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, ProviderError> {
        request.validate()?;
        let body = self.body(request);
        let started = Instant::now();
        let max_attempts = self.retry.max_attempts.max(1);
        let mut attempts = 0;
        loop {
            attempts += 1;
            match self.attempt(&body, attempts, started) {
                Attempt::Done(response) => return Ok(response),
                Attempt::Fatal(err) => return Err(err),
                Attempt::Retry(err) if attempts >= max_attempts => return Err(err),
                Attempt::Retry(_) => {
                    let unit = self.jitter.lock().expect("jitter lock poisoned").gen_range(-1.0..=1.0);
                    self.sleeper.sleep(self.retry.jittered_delay(attempts, unit));
                }
            }
        }
    }

    fn backend(&self) -> BackendKind {
        BackendKind::Live
    }
}
