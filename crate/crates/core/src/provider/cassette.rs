//! Record/replay of provider exchanges as JSON lines.
//!
//! Each line is `{digest, purpose, request: {messages, temperature,
//! max_output_tokens}, response: {text}}`. Replay looks responses up by
//! request digest; the first entry for a digest wins.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{
    estimate_tokens, BackendKind, CompletionRequest, CompletionResponse, Message, Provider, ProviderError, Purpose,
    Usage,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CassetteRequest {
    pub messages: Vec<Message>,
    pub temperature: f64,
    pub max_output_tokens: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CassetteResponse {
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CassetteEntry {
    pub digest: String,
    pub purpose: Purpose,
    pub request: CassetteRequest,
    pub response: CassetteResponse,
}

impl CassetteEntry {
    pub fn new(request: &CompletionRequest, text: &str) -> Self {
        Self {
            digest: request.digest(),
            purpose: request.purpose,
            request: CassetteRequest {
                messages: request.messages.clone(),
                temperature: request.temperature,
                max_output_tokens: request.max_output_tokens,
            },
            response: CassetteResponse { text: text.to_string() },
        }
    }
}

/// Reads every entry of a cassette file.
pub fn read_cassette(path: &Path) -> Result<Vec<CassetteEntry>, ProviderError> {
    let file = File::open(path).map_err(|e| ProviderError::Storage(format!("opening {}: {e}", path.display())))?;
    let mut entries = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| ProviderError::Storage(format!("reading {}: {e}", path.display())))?;
        if line.trim().is_empty() {
            continue;
        }
        let entry = serde_json::from_str(&line)
            .map_err(|e| ProviderError::Storage(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
        entries.push(entry);
    }
    Ok(entries)
}

fn index(entries: Vec<CassetteEntry>) -> HashMap<String, String> {
    let mut map = HashMap::new();
    for entry in entries {
        map.entry(entry.digest).or_insert(entry.response.text);
    }
    map
}

/// Answers from a recorded cassette; a missing digest is a [`ProviderError::ReplayMiss`].
#[derive(Debug, Default)]
pub struct ReplayProvider {
    responses: HashMap<String, String>,
}

impl ReplayProvider {
    pub fn open(path: &Path) -> Result<Self, ProviderError> {
        Ok(Self::from_entries(read_cassette(path)?))
    }

    pub fn from_entries(entries: Vec<CassetteEntry>) -> Self {
        Self { responses: index(entries) }
    }

    pub fn len(&self) -> usize {
        self.responses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.responses.is_empty()
    }
}

fn estimated_usage(request: &CompletionRequest, text: &str) -> Usage {
    Usage { input_tokens: estimate_tokens(&request.joined_content()), output_tokens: estimate_tokens(text) }
}

impl Provider for ReplayProvider {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, ProviderError> {
        request.validate()?;
        let started = Instant::now();
        let digest = request.digest();
        let text = self.responses.get(&digest).ok_or(ProviderError::ReplayMiss { digest, purpose: request.purpose })?;
        Ok(CompletionResponse {
            text: text.clone(),
            usage: estimated_usage(request, text),
            latency_ms: started.elapsed().as_millis() as u64,
            backend: BackendKind::Replay,
            attempts: 1,
        })
    }

    fn backend(&self) -> BackendKind {
        BackendKind::Replay
    }
}

/// Wraps a provider and appends every new exchange to a cassette.
///
/// Repeated digests are answered from what was already recorded, so the
/// recording run sees exactly the responses a later replay will serve.
pub struct RecordingProvider<P> {
    inner: P,
    path: PathBuf,
    state: Mutex<RecorderState>,
}

struct RecorderState {
    file: File,
    seen: HashMap<String, String>,
}

impl<P: Provider> RecordingProvider<P> {
    /// Opens (or creates) the cassette in append mode; existing entries are
    /// loaded so an interrupted recording can be continued.
    pub fn open(inner: P, path: &Path) -> Result<Self, ProviderError> {
        let existing = if path.exists() { read_cassette(path)? } else { Vec::new() };
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)
                .map_err(|e| ProviderError::Storage(format!("creating {}: {e}", dir.display())))?;
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| ProviderError::Storage(format!("opening {}: {e}", path.display())))?;
        Ok(Self { inner, path: path.to_path_buf(), state: Mutex::new(RecorderState { file, seen: index(existing) }) })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

impl<P: Provider> Provider for RecordingProvider<P> {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, ProviderError> {
        let digest = request.digest();
        if let Some(text) = self.state.lock().expect("recorder lock poisoned").seen.get(&digest) {
            return Ok(CompletionResponse {
                text: text.clone(),
                usage: estimated_usage(request, text),
                latency_ms: 0,
                backend: self.inner.backend(),
                attempts: 1,
            });
        }
        let mut response = self.inner.complete(request)?;
        let mut state = self.state.lock().expect("recorder lock poisoned");
        if let Some(text) = state.seen.get(&digest) {
            // Another worker recorded the same request first.
            response.usage = estimated_usage(request, text);
            response.text = text.clone();
            return Ok(response);
        }
        let line = serde_json::to_string(&CassetteEntry::new(request, &response.text)).expect("entry serializes");
        writeln!(state.file, "{line}")
            .and_then(|_| state.file.flush())
            .map_err(|e| ProviderError::Storage(format!("writing {}: {e}", self.path.display())))?;
        state.seen.insert(digest, response.text.clone());
        Ok(response)
    }

    fn backend(&self) -> BackendKind {
        self.inner.backend()
    }
}
