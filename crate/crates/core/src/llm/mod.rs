//! Completion gateway over pluggable backends with record/replay.

mod http;
mod prompts;
mod structured;
mod transcript;

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use http::{HttpConfig, HttpTransport};
pub use prompts::{render, template, PromptError, TEMPLATE_VERSION};
pub use structured::{
    complete_structured, complete_with_retry, parse_as, parse_structured, Field, Shape,
    RETRY_HEADER,
};
pub use transcript::{read_transcript, TranscriptEntry, TRANSCRIPT_FILE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    QueryGeneration,
    FileLocator,
    Preassimilator,
    CoderParser,
    CodeGeneration,
    Refinement,
    FinalSelection,
}

impl Role {
    pub const ALL: [Role; 7] = [
        Role::QueryGeneration,
        Role::FileLocator,
        Role::Preassimilator,
        Role::CoderParser,
        Role::CodeGeneration,
        Role::Refinement,
        Role::FinalSelection,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Role::QueryGeneration => "query_generation",
            Role::FileLocator => "file_locator",
            Role::Preassimilator => "preassimilator",
            Role::CoderParser => "coder_parser",
            Role::CodeGeneration => "code_generation",
            Role::Refinement => "refinement",
            Role::FinalSelection => "final_selection",
        }
    }

    pub fn default_max_tokens(self) -> u32 {
        match self {
            Role::CodeGeneration | Role::Refinement => 4096,
            _ => 1024,
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum LlmError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("backend error: {0}")]
    Transport(String),
    #[error("replay miss for {role} request with fingerprint {fingerprint}")]
    ReplayMiss { role: Role, fingerprint: String },
    #[error("transcript error: {0}")]
    Transcript(String),
    #[error("{role} output rejected after {attempts} attempt(s): {diagnostic}")]
    Exhausted {
        role: Role,
        attempts: usize,
        diagnostic: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub role: Role,
    pub prompt: String,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl CompletionRequest {
    pub fn new(role: Role, prompt: impl Into<String>, temperature: f64) -> Self {
        CompletionRequest {
            role,
            prompt: prompt.into(),
            temperature,
            max_tokens: role.default_max_tokens(),
        }
    }

    pub fn validate(&self) -> Result<(), LlmError> {
        if self.prompt.trim().is_empty() {
            return Err(LlmError::InvalidRequest("empty prompt".into()));
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(LlmError::InvalidRequest(format!(
                "temperature {} outside [0, 2]",
                self.temperature
            )));
        }
        if self.max_tokens == 0 {
            return Err(LlmError::InvalidRequest(
                "max_tokens must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Hex sha256 over role, temperature and prompt.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.role.as_str().as_bytes());
        h.update(b"\n");
        h.update(self.temperature.to_string().as_bytes());
        h.update(b"\n");
        h.update(self.prompt.as_bytes());
        hex::encode(h.finalize())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompletionResponse {
    pub text: String,
    pub usage: Usage,
    pub backend_id: String,
}

pub trait Transport: Send + Sync {
    fn send(&self, request: &CompletionRequest) -> Result<CompletionResponse, LlmError>;
}

/// Transport backed by a closure; used for scripted and offline runs.
pub struct FnTransport<F> {
    f: F,
    calls: AtomicUsize,
}

impl<F> FnTransport<F>
where
    F: Fn(&CompletionRequest) -> Result<String, LlmError> + Send + Sync,
{
    pub fn new(f: F) -> Self {
        FnTransport {
            f,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl<F> Transport for FnTransport<F>
where
    F: Fn(&CompletionRequest) -> Result<String, LlmError> + Send + Sync,
{
    fn send(&self, request: &CompletionRequest) -> Result<CompletionResponse, LlmError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let text = (self.f)(request)?;
        Ok(CompletionResponse {
            usage: Usage {
                prompt_tokens: request.prompt.split_whitespace().count() as u64,
                completion_tokens: text.split_whitespace().count() as u64,
            },
            text,
            backend_id: "scripted".into(),
        })
    }
}

/// Fails every call and counts attempts; installed under replay so any
/// escape to the network is observable.
#[derive(Debug, Default)]
pub struct PoisonedTransport {
    calls: AtomicUsize,
}

impl PoisonedTransport {
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl Transport for PoisonedTransport {
    fn send(&self, _request: &CompletionRequest) -> Result<CompletionResponse, LlmError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        Err(LlmError::Transport("network access is disabled".into()))
    }
}

impl<T: Transport + ?Sized> Transport for Arc<T> {
    fn send(&self, request: &CompletionRequest) -> Result<CompletionResponse, LlmError> {
        (**self).send(request)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendMode {
    Live,
    Replay,
    Record,
}

impl std::str::FromStr for BackendMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "live" => Ok(BackendMode::Live),
            "replay" => Ok(BackendMode::Replay),
            "record" => Ok(BackendMode::Record),
            other => Err(format!("unknown backend `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CallRecord {
    pub seq: usize,
    pub role: Role,
    pub fingerprint: String,
    pub backend_id: String,
    pub prompt_chars: usize,
    pub response_chars: usize,
    pub usage: Usage,
}

/// Responses for one fingerprint are served in recorded order; once only
/// one remains it is served for every further identical request.
#[derive(Default)]
struct ReplayState {
    queues: HashMap<String, VecDeque<CompletionResponse>>,
}

impl ReplayState {
    fn take(&mut self, fingerprint: &str) -> Option<CompletionResponse> {
        let queue = self.queues.get_mut(fingerprint)?;
        if queue.len() > 1 {
            queue.pop_front()
        } else {
            queue.front().cloned()
        }
    }
}

pub struct Gateway {
    mode: BackendMode,
    transport: Box<dyn Transport>,
    replay: Mutex<ReplayState>,
    recorder: Option<Mutex<File>>,
    run_log: Option<Mutex<File>>,
    calls: Mutex<Vec<CallRecord>>,
}

impl Gateway {
    /// Live gateway over `transport`, no transcript.
    pub fn live(transport: impl Transport + 'static) -> Self {
        Gateway {
            mode: BackendMode::Live,
            transport: Box::new(transport),
            replay: Mutex::new(ReplayState::default()),
            recorder: None,
            run_log: None,
            calls: Mutex::new(Vec::new()),
        }
    }

    /// Replay mode loads `transcript`; record mode appends to it. The
    /// transport is never invoked under replay.
    pub fn new(
        mode: BackendMode,
        transport: impl Transport + 'static,
        transcript: Option<&Path>,
    ) -> Result<Self, LlmError> {
        let mut gateway = Gateway::live(transport);
        gateway.mode = mode;
        match mode {
            BackendMode::Live => {}
            BackendMode::Replay => {
                let path = transcript
                    .ok_or_else(|| LlmError::Transcript("replay requires a transcript".into()))?;
                let mut state = ReplayState::default();
                for entry in read_transcript(path)? {
                    state
                        .queues
                        .entry(entry.fingerprint)
                        .or_default()
                        .push_back(entry.response);
                }
                gateway.replay = Mutex::new(state);
            }
            BackendMode::Record => {
                let path = transcript
                    .ok_or_else(|| LlmError::Transcript("record requires a transcript".into()))?;
                if let Some(parent) = path.parent() {
                    std::fs::create_dir_all(parent)
                        .map_err(|e| LlmError::Transcript(e.to_string()))?;
                }
                let file = OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(path)
                    .map_err(|e| LlmError::Transcript(format!("{}: {e}", path.display())))?;
                gateway.recorder = Some(Mutex::new(file));
            }
        }
        Ok(gateway)
    }

    /// Appends one JSON line per completed call to `path`, with the full
    /// prompt and completion text.
    pub fn with_run_log(mut self, path: PathBuf) -> Result<Self, LlmError> {
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| LlmError::Transcript(format!("{}: {e}", path.display())))?;
        self.run_log = Some(Mutex::new(file));
        Ok(self)
    }

    pub fn mode(&self) -> BackendMode {
        self.mode
    }

    pub fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, LlmError> {
        request.validate()?;
        let fingerprint = request.fingerprint();
        let response = match self.mode {
            BackendMode::Replay => {
                self.replay
                    .lock()
                    .unwrap()
                    .take(&fingerprint)
                    .ok_or_else(|| LlmError::ReplayMiss {
                        role: request.role,
                        fingerprint: fingerprint.clone(),
                    })?
            }
            BackendMode::Live => self.transport.send(request)?,
            BackendMode::Record => {
                let response = self.transport.send(request)?;
                let entry = TranscriptEntry {
                    fingerprint: fingerprint.clone(),
                    role: request.role,
                    temperature: request.temperature,
                    prompt: request.prompt.clone(),
                    response: response.clone(),
                };
                let line = serde_json::to_string(&entry).expect("transcript entry serializes");
                let mut file = self
                    .recorder
                    .as_ref()
                    .expect("recorder open")
                    .lock()
                    .unwrap();
                writeln!(file, "{line}").map_err(|e| LlmError::Transcript(e.to_string()))?;
                file.flush()
                    .map_err(|e| LlmError::Transcript(e.to_string()))?;
                response
            }
        };
        self.log_call(request, fingerprint, &response);
        Ok(response)
    }

    fn log_call(
        &self,
        request: &CompletionRequest,
        fingerprint: String,
        response: &CompletionResponse,
    ) {
        let mut calls = self.calls.lock().unwrap();
        let record = CallRecord {
            seq: calls.len(),
            role: request.role,
            fingerprint,
            backend_id: response.backend_id.clone(),
            prompt_chars: request.prompt.chars().count(),
            response_chars: response.text.chars().count(),
            usage: response.usage,
        };
        tracing::debug!(role = %record.role, seq = record.seq, "completion");
        if let Some(log) = &self.run_log {
            let entry = serde_json::json!({
                "call": &record,
                "temperature": request.temperature,
                "prompt": &request.prompt,
                "completion": &response.text,
            });
            let line = entry.to_string();
            let mut file = log.lock().unwrap();
            if let Err(err) = writeln!(file, "{line}") {
                tracing::warn!(error = %err, "run log write failed");
            }
        }
        calls.push(record);
    }

    pub fn calls(&self) -> Vec<CallRecord> {
        self.calls.lock().unwrap().clone()
    }

    pub fn calls_by_role(&self) -> BTreeMap<Role, usize> {
        let mut counts = BTreeMap::new();
        for call in self.calls.lock().unwrap().iter() {
            *counts.entry(call.role).or_insert(0) += 1;
        }
        counts
    }

    pub fn usage_total(&self) -> Usage {
        self.calls
            .lock()
            .unwrap()
            .iter()
            .fold(Usage::default(), |acc, c| Usage {
                prompt_tokens: acc.prompt_tokens + c.usage.prompt_tokens,
                completion_tokens: acc.completion_tokens + c.usage.completion_tokens,
            })
    }
}
