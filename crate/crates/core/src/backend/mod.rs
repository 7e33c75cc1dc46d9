//! Chat-completion boundary shared by every agent.
//!
//! Agents only see [`ChatBackend`]. Requests name their purpose and a
//! caller-chosen subject id, which is what the scripted backend keys on.

mod live;
mod scripted;

use std::collections::BTreeMap;
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};

pub use live::{LiveBackend, LiveConfig, ENV_API_BASE, ENV_API_KEY, ENV_MODEL};
pub use scripted::{load_replay, write_replay, RecordingBackend, ReplayRecord, ScriptedBackend};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
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

    pub fn assistant(content: impl Into<String>) -> Self {
        Self { role: Role::Assistant, content: content.into() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Decoding {
    pub temperature: f64,
    pub top_p: f64,
    pub n: u32,
}

impl Default for Decoding {
    fn default() -> Self {
        Self { temperature: 0.0, top_p: 1.0, n: 1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Purpose {
    Profile,
    Judge,
    Synthesize,
    Review,
}

impl Purpose {
    pub const ALL: [Purpose; 4] = [Purpose::Profile, Purpose::Judge, Purpose::Synthesize, Purpose::Review];

    pub fn as_str(self) -> &'static str {
        match self {
            Purpose::Profile => "profile",
            Purpose::Judge => "judge",
            Purpose::Synthesize => "synthesize",
            Purpose::Review => "review",
        }
    }
}

impl std::fmt::Display for Purpose {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatRequest {
    pub messages: Vec<Message>,
    pub decoding: Decoding,
    pub purpose: Purpose,
    /// Stable id of what the call is about (an MCS or group id).
    pub subject: String,
}

impl ChatRequest {
    pub fn new(purpose: Purpose, subject: impl Into<String>, messages: Vec<Message>) -> Self {
        Self { messages, decoding: Decoding::default(), purpose, subject: subject.into() }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChatResponse {
    pub text: String,
    pub usage: Usage,
}

#[derive(Debug, thiserror::Error)]
pub enum BackendError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("authentication rejected: {0}")]
    Auth(String),
    #[error("no scripted response for ({purpose}, {subject})")]
    MissingScriptEntry { purpose: Purpose, subject: String },
    #[error("scripted responses for ({purpose}, {subject}) exhausted at seq {seq}")]
    ReplayExhausted { purpose: Purpose, subject: String, seq: usize },
    #[error("cannot write replay file: {0}")]
    Write(String),
    #[error("cannot read replay file: {0}")]
    ReplayFile(String),
    #[error("backend configuration: {0}")]
    Config(String),
}

pub trait ChatBackend: Send + Sync {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError>;
}

impl<B: ChatBackend + ?Sized> ChatBackend for &B {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        (**self).complete(request)
    }
}

impl<B: ChatBackend + ?Sized> ChatBackend for Box<B> {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        (**self).complete(request)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PurposeUsage {
    pub requests: u64,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

impl PurposeUsage {
    fn add(&mut self, usage: Usage) {
        self.requests += 1;
        self.prompt_tokens += usage.prompt_tokens;
        self.completion_tokens += usage.completion_tokens;
    }
}

/// Per-commit usage totals.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UsageLedger {
    pub total: PurposeUsage,
    pub by_purpose: BTreeMap<Purpose, PurposeUsage>,
    pub wall_time_ms: u64,
}

impl UsageLedger {
    pub fn record(&mut self, purpose: Purpose, usage: Usage) {
        self.total.add(usage);
        self.by_purpose.entry(purpose).or_default().add(usage);
    }

    pub fn requests(&self, purpose: Purpose) -> u64 {
        self.by_purpose.get(&purpose).map_or(0, |p| p.requests)
    }

    pub fn set_wall_time(&mut self, elapsed: Duration) {
        self.wall_time_ms = elapsed.as_millis() as u64;
    }

    pub fn merge(&mut self, other: &UsageLedger) {
        self.total.requests += other.total.requests;
        self.total.prompt_tokens += other.total.prompt_tokens;
        self.total.completion_tokens += other.total.completion_tokens;
        for (purpose, usage) in &other.by_purpose {
            let entry = self.by_purpose.entry(*purpose).or_default();
            entry.requests += usage.requests;
            entry.prompt_tokens += usage.prompt_tokens;
            entry.completion_tokens += usage.completion_tokens;
        }
        self.wall_time_ms += other.wall_time_ms;
    }
}

/// Wraps a backend and books every successful response into a ledger.
pub struct MeteredBackend<B> {
    inner: B,
    ledger: Mutex<UsageLedger>,
}

impl<B: ChatBackend> MeteredBackend<B> {
    pub fn new(inner: B) -> Self {
        Self { inner, ledger: Mutex::new(UsageLedger::default()) }
    }

    pub fn ledger(&self) -> UsageLedger {
        self.ledger.lock().unwrap().clone()
    }
}

impl<B: ChatBackend> ChatBackend for MeteredBackend<B> {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        let response = self.inner.complete(request)?;
        self.ledger.lock().unwrap().record(request.purpose, response.usage);
        Ok(response)
    }
}

/// Prefixes every subject id, so one replay file can hold many commits.
pub struct SubjectScope<B> {
    inner: B,
    prefix: String,
}

impl<B: ChatBackend> SubjectScope<B> {
    pub fn new(inner: B, scope: &str) -> Self {
        Self { inner, prefix: format!("{scope}/") }
    }
}

impl<B: ChatBackend> ChatBackend for SubjectScope<B> {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        let mut scoped = request.clone();
        scoped.subject = format!("{}{}", self.prefix, request.subject);
        self.inner.complete(&scoped)
    }
}
