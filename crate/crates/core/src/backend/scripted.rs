use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{BackendError, ChatBackend, ChatRequest, ChatResponse, Purpose, Usage};

/// One line of a replay file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplayRecord {
    pub purpose_tag: Purpose,
    pub subject_id: String,
    pub seq: usize,
    pub response_text: String,
    #[serde(default, skip_serializing_if = "is_zero")]
    pub prompt_tokens: u64,
    #[serde(default, skip_serializing_if = "is_zero")]
    pub completion_tokens: u64,
}

fn is_zero(v: &u64) -> bool {
    *v == 0
}

impl ReplayRecord {
    pub fn new(purpose: Purpose, subject: impl Into<String>, seq: usize, text: impl Into<String>) -> Self {
        Self {
            purpose_tag: purpose,
            subject_id: subject.into(),
            seq,
            response_text: text.into(),
            prompt_tokens: 0,
            completion_tokens: 0,
        }
    }
}

pub fn load_replay(path: &Path) -> Result<Vec<ReplayRecord>, BackendError> {
    let file = File::open(path).map_err(|e| BackendError::ReplayFile(format!("{}: {e}", path.display())))?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| BackendError::ReplayFile(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line)
            .map_err(|e| BackendError::ReplayFile(format!("{}:{}: {e}", path.display(), i + 1)))?;
        records.push(record);
    }
    Ok(records)
}

pub fn write_replay(path: &Path, records: &[ReplayRecord]) -> Result<(), BackendError> {
    let file = File::create(path).map_err(|e| BackendError::Write(e.to_string()))?;
    let mut out = BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| BackendError::Write(e.to_string()))?;
        writeln!(out, "{line}").map_err(|e| BackendError::Write(e.to_string()))?;
    }
    out.flush().map_err(|e| BackendError::Write(e.to_string()))
}

type Key = (Purpose, String);

/// Answers from a replay script. Each (purpose, subject) key holds an
/// ordered list of responses consumed one per call.
pub struct ScriptedBackend {
    script: HashMap<Key, Vec<(String, Usage)>>,
    cursors: Mutex<HashMap<Key, usize>>,
}

impl ScriptedBackend {
    pub fn new(records: impl IntoIterator<Item = ReplayRecord>) -> Self {
        let mut sorted: Vec<ReplayRecord> = records.into_iter().collect();
        sorted.sort_by(|a, b| (a.purpose_tag, &a.subject_id, a.seq).cmp(&(b.purpose_tag, &b.subject_id, b.seq)));
        let mut script: HashMap<Key, Vec<(String, Usage)>> = HashMap::new();
        for r in sorted {
            let usage = Usage { prompt_tokens: r.prompt_tokens, completion_tokens: r.completion_tokens };
            script.entry((r.purpose_tag, r.subject_id)).or_default().push((r.response_text, usage));
        }
        Self { script, cursors: Mutex::new(HashMap::new()) }
    }

    pub fn from_file(path: &Path) -> Result<Self, BackendError> {
        Ok(Self::new(load_replay(path)?))
    }

    /// Keys whose responses were not all consumed.
    pub fn unused(&self) -> Vec<(Purpose, String, usize)> {
        let cursors = self.cursors.lock().unwrap();
        let mut left: Vec<_> = self
            .script
            .iter()
            .filter_map(|(key, list)| {
                let used = cursors.get(key).copied().unwrap_or(0);
                (used < list.len()).then(|| (key.0, key.1.clone(), list.len() - used))
            })
            .collect();
        left.sort();
        left
    }
}

impl ChatBackend for ScriptedBackend {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        let key = (request.purpose, request.subject.clone());
        let Some(list) = self.script.get(&key) else {
            return Err(BackendError::MissingScriptEntry { purpose: request.purpose, subject: request.subject.clone() });
        };
        let mut cursors = self.cursors.lock().unwrap();
        let seq = cursors.entry(key).or_insert(0);
        let Some((text, usage)) = list.get(*seq) else {
            return Err(BackendError::ReplayExhausted {
                purpose: request.purpose,
                subject: request.subject.clone(),
                seq: *seq,
            });
        };
        *seq += 1;
        Ok(ChatResponse { text: text.clone(), usage: *usage })
    }
}

/// Passes calls through and appends each response to a replay file.
pub struct RecordingBackend<B> {
    inner: B,
    state: Mutex<RecorderState>,
}

struct RecorderState {
    out: BufWriter<File>,
    seqs: HashMap<Key, usize>,
}

impl<B: ChatBackend> RecordingBackend<B> {
    pub fn create(inner: B, path: &Path) -> Result<Self, BackendError> {
        let file = File::create(path).map_err(|e| BackendError::Write(format!("{}: {e}", path.display())))?;
        Ok(Self { inner, state: Mutex::new(RecorderState { out: BufWriter::new(file), seqs: HashMap::new() }) })
    }
}

impl<B: ChatBackend> ChatBackend for RecordingBackend<B> {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        let response = self.inner.complete(request)?;
        let mut state = self.state.lock().unwrap();
        let seq = state.seqs.entry((request.purpose, request.subject.clone())).or_insert(0);
        let record = ReplayRecord {
            purpose_tag: request.purpose,
            subject_id: request.subject.clone(),
            seq: *seq,
            response_text: response.text.clone(),
            prompt_tokens: response.usage.prompt_tokens,
            completion_tokens: response.usage.completion_tokens,
        };
        *seq += 1;
        let line = serde_json::to_string(&record).map_err(|e| BackendError::Write(e.to_string()))?;
        writeln!(state.out, "{line}").map_err(|e| BackendError::Write(e.to_string()))?;
        state.out.flush().map_err(|e| BackendError::Write(e.to_string()))?;
        Ok(response)
    }
}
