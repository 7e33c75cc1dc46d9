//! Intent profiling: prompt rendering, response parsing and the retrying
//! request loop shared by every agent.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::backend::{BackendError, ChatBackend, ChatRequest, Message, Purpose};
use crate::purifier::MinimalChangeSubgraph;

pub const IOCOT_TEMPLATE: &str = include_str!("../assets/prompts/iocot.v1.txt");
pub const IOCOT_TEMPLATE_VERSION: &str = "iocot.v1";
const FORMAT_REMINDER: &str = include_str!("../assets/prompts/format_reminder.v1.txt");

pub const DEFAULT_RETRIES: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ChangeCategory {
    BugFix,
    Feature,
    Refactoring,
    Performance,
    Documentation,
    Test,
    Others,
}

impl ChangeCategory {
    pub const ALL: [ChangeCategory; 7] = [
        ChangeCategory::BugFix,
        ChangeCategory::Feature,
        ChangeCategory::Refactoring,
        ChangeCategory::Performance,
        ChangeCategory::Documentation,
        ChangeCategory::Test,
        ChangeCategory::Others,
    ];

    /// The label shown to the model.
    pub fn label(self) -> &'static str {
        match self {
            ChangeCategory::BugFix => "Bug Fix",
            ChangeCategory::Feature => "Feature",
            ChangeCategory::Refactoring => "Refactoring",
            ChangeCategory::Performance => "Performance",
            ChangeCategory::Documentation => "Documentation",
            ChangeCategory::Test => "Test",
            ChangeCategory::Others => "Others",
        }
    }
}

impl fmt::Display for ChangeCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for ChangeCategory {
    type Err = IntentError;

    /// Case-insensitive; spaces, `_` and `-` are ignored.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let squashed: String = s
            .chars()
            .filter(|c| !c.is_whitespace() && *c != '_' && *c != '-')
            .flat_map(char::to_lowercase)
            .collect();
        Self::ALL
            .into_iter()
            .find(|c| c.label().replace(' ', "").to_lowercase() == squashed)
            .ok_or_else(|| IntentError::InvalidCategory(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntentProfile {
    pub category: ChangeCategory,
    pub summary: String,
    pub what: String,
    pub how: String,
    pub why: String,
}

impl IntentProfile {
    pub fn new(category: ChangeCategory, summary: impl Into<String>) -> Self {
        Self { category, summary: summary.into(), what: String::new(), how: String::new(), why: String::new() }
    }

    /// The JSON object a well-behaved model would answer with.
    pub fn to_response_json(&self) -> String {
        serde_json::json!({
            "what": self.what,
            "how": self.how,
            "why": self.why,
            "category": self.category.label(),
            "summary": self.summary,
        })
        .to_string()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum IntentError {
    #[error("response contains no JSON object")]
    NoStructuredPayload,
    #[error("response is missing field `{0}`")]
    MissingField(&'static str),
    #[error("invalid category `{0}`")]
    InvalidCategory(String),
    #[error("profiling failed after retries ({reason}); last response: {last_raw:?}")]
    ProfileFailure { reason: String, last_raw: String },
    #[error(transparent)]
    Backend(#[from] BackendError),
}

/// First JSON object embedded in `raw`, skipping fences and prose.
pub fn extract_json_object(raw: &str) -> Option<Map<String, Value>> {
    for (i, _) in raw.match_indices('{') {
        let mut stream = serde_json::Deserializer::from_str(&raw[i..]).into_iter::<Value>();
        if let Some(Ok(Value::Object(map))) = stream.next() {
            return Some(map);
        }
    }
    None
}

/// Looks up a key case-insensitively.
pub fn field<'a>(map: &'a Map<String, Value>, name: &str) -> Option<&'a Value> {
    map.get(name).or_else(|| map.iter().find(|(k, _)| k.eq_ignore_ascii_case(name)).map(|(_, v)| v))
}

fn text_field(map: &Map<String, Value>, name: &'static str) -> Result<String, IntentError> {
    match field(map, name) {
        Some(Value::String(s)) => Ok(s.trim().to_string()),
        Some(Value::Null) | None => Err(IntentError::MissingField(name)),
        Some(other) => Ok(other.to_string()),
    }
}

pub fn parse_intent_response(raw: &str) -> Result<IntentProfile, IntentError> {
    let mut map = extract_json_object(raw).ok_or(IntentError::NoStructuredPayload)?;
    // Some models wrap the answer one level deep.
    if field(&map, "category").is_none() {
        if let Some(inner) = map.values().find_map(|v| match v {
            Value::Object(o) if field(o, "category").is_some() => Some(o.clone()),
            _ => None,
        }) {
            map = inner;
        }
    }
    let category: ChangeCategory = text_field(&map, "category")?.parse()?;
    let summary = text_field(&map, "summary")?;
    if summary.is_empty() {
        return Err(IntentError::MissingField("summary"));
    }
    Ok(IntentProfile {
        category,
        summary,
        what: text_field(&map, "what")?,
        how: text_field(&map, "how")?,
        why: text_field(&map, "why")?,
    })
}

pub fn render_iocot_prompt(mcs: &MinimalChangeSubgraph) -> String {
    IOCOT_TEMPLATE.replace("{{diff}}", &mcs.rendered_diff)
}

/// Sends `prompt`, parsing the answer with `parse`. A parse failure is
/// answered with a format reminder in the same conversation, at most
/// `retries` times. Backend errors are returned immediately.
pub fn ask_structured<T, E: fmt::Display>(
    backend: &dyn ChatBackend,
    purpose: Purpose,
    subject: &str,
    prompt: String,
    retries: usize,
    parse: impl Fn(&str) -> Result<T, E>,
) -> Result<T, StructuredFailure> {
    let mut messages = vec![Message::user(prompt)];
    let mut attempt = 0;
    loop {
        let request = ChatRequest::new(purpose, subject, messages.clone());
        let response = backend.complete(&request).map_err(StructuredFailure::Backend)?;
        match parse(&response.text) {
            Ok(value) => return Ok(value),
            Err(problem) if attempt < retries => {
                log::debug!("{purpose} answer for {subject} rejected: {problem}");
                messages.push(Message::assistant(response.text));
                messages.push(Message::user(FORMAT_REMINDER.replace("{{problem}}", &problem.to_string())));
                attempt += 1;
            }
            Err(problem) => {
                return Err(StructuredFailure::Unparsable { reason: problem.to_string(), last_raw: response.text })
            }
        }
    }
}

#[derive(Debug)]
pub enum StructuredFailure {
    Backend(BackendError),
    Unparsable { reason: String, last_raw: String },
}

impl From<StructuredFailure> for IntentError {
    fn from(f: StructuredFailure) -> Self {
        match f {
            StructuredFailure::Backend(e) => IntentError::Backend(e),
            StructuredFailure::Unparsable { reason, last_raw } => IntentError::ProfileFailure { reason, last_raw },
        }
    }
}

pub fn profile_mcs(
    mcs: &MinimalChangeSubgraph,
    backend: &dyn ChatBackend,
    retries: usize,
) -> Result<IntentProfile, IntentError> {
    let prompt = render_iocot_prompt(mcs);
    Ok(ask_structured(backend, Purpose::Profile, &mcs.mcs_id.0, prompt, retries, parse_intent_response)?)
}
