use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{BackendError, ChatBackend, ChatRequest, ChatResponse, Message, Usage};

pub const ENV_API_BASE: &str = "UNTANGLER_API_BASE";
pub const ENV_MODEL: &str = "UNTANGLER_MODEL";
pub const ENV_API_KEY: &str = "UNTANGLER_API_KEY";

#[derive(Debug, Clone)]
pub struct LiveConfig {
    /// Base URL up to and including the API version, e.g. `https://host/v1`.
    pub base_url: String,
    pub model: String,
    pub api_key: Option<String>,
    pub max_attempts: u32,
    pub initial_backoff: Duration,
    pub timeout: Duration,
    pub max_concurrent: usize,
}

impl LiveConfig {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            model: model.into(),
            api_key: None,
            max_attempts: 3,
            initial_backoff: Duration::from_millis(500),
            timeout: Duration::from_secs(120),
            max_concurrent: 4,
        }
    }

    pub fn from_env() -> Result<Self, BackendError> {
        let var = |name: &str| std::env::var(name).ok().filter(|v| !v.is_empty());
        let base = var(ENV_API_BASE).ok_or_else(|| BackendError::Config(format!("{ENV_API_BASE} is not set")))?;
        let model = var(ENV_MODEL).ok_or_else(|| BackendError::Config(format!("{ENV_MODEL} is not set")))?;
        let mut config = Self::new(base, model);
        config.api_key = var(ENV_API_KEY);
        Ok(config)
    }
}

#[derive(Serialize)]
struct WireRequest<'a> {
    model: &'a str,
    messages: &'a [Message],
    temperature: f64,
    top_p: f64,
    n: u32,
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
    #[serde(default)]
    usage: Option<WireUsage>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireMessage,
}

#[derive(Deserialize)]
struct WireMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct WireUsage {
    #[serde(default)]
    prompt_tokens: u64,
    #[serde(default)]
    completion_tokens: u64,
}

struct Semaphore {
    available: Mutex<usize>,
    freed: Condvar,
}

impl Semaphore {
    fn acquire(&self) -> Permit<'_> {
        let mut n = self.available.lock().unwrap();
        while *n == 0 {
            n = self.freed.wait(n).unwrap();
        }
        *n -= 1;
        Permit(self)
    }
}

struct Permit<'a>(&'a Semaphore);

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.available.lock().unwrap() += 1;
        self.0.freed.notify_one();
    }
}

enum Attempt {
    Retry(String),
    Fatal(BackendError),
}

/// Client for an OpenAI-compatible `/chat/completions` endpoint.
pub struct LiveBackend {
    config: LiveConfig,
    client: reqwest::blocking::Client,
    permits: Semaphore,
}

impl LiveBackend {
    pub fn new(config: LiveConfig) -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| BackendError::Config(e.to_string()))?;
        let permits = Semaphore { available: Mutex::new(config.max_concurrent.max(1)), freed: Condvar::new() };
        Ok(Self { config, client, permits })
    }

    fn endpoint(&self) -> String {
        format!("{}/chat/completions", self.config.base_url.trim_end_matches('/'))
    }

    fn attempt(&self, body: &WireRequest<'_>) -> Result<ChatResponse, Attempt> {
        let mut call = self.client.post(self.endpoint()).json(body);
        if let Some(key) = &self.config.api_key {
            call = call.bearer_auth(key);
        }
        let response = call.send().map_err(|e| Attempt::Retry(e.to_string()))?;
        let status = response.status();
        if status.as_u16() == 401 || status.as_u16() == 403 {
            let text = response.text().unwrap_or_default();
            return Err(Attempt::Fatal(BackendError::Auth(format!("{status}: {text}"))));
        }
        if status.is_server_error() {
            return Err(Attempt::Retry(format!("server returned {status}")));
        }
        if !status.is_success() {
            let text = response.text().unwrap_or_default();
            return Err(Attempt::Fatal(BackendError::Transport(format!("{status}: {text}"))));
        }
        let wire: WireResponse = response.json().map_err(|e| Attempt::Retry(format!("bad response body: {e}")))?;
        let text = wire
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| Attempt::Fatal(BackendError::Transport("response has no choices".into())))?;
        let usage = wire
            .usage
            .map(|u| Usage { prompt_tokens: u.prompt_tokens, completion_tokens: u.completion_tokens })
            .unwrap_or_default();
        Ok(ChatResponse { text, usage })
    }
}

impl ChatBackend for LiveBackend {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        let _permit = self.permits.acquire();
        let body = WireRequest {
            model: &self.config.model,
            messages: &request.messages,
            temperature: request.decoding.temperature,
            top_p: request.decoding.top_p,
            n: request.decoding.n,
        };
        let mut backoff = self.config.initial_backoff;
        let attempts = self.config.max_attempts.max(1);
        let mut last = String::new();
        for attempt in 1..=attempts {
            match self.attempt(&body) {
                Ok(response) => return Ok(response),
                Err(Attempt::Fatal(e)) => return Err(e),
                Err(Attempt::Retry(reason)) => {
                    log::warn!("{} call for {} failed (attempt {attempt}/{attempts}): {reason}", request.purpose, request.subject);
                    last = reason;
                    if attempt < attempts {
                        std::thread::sleep(backoff);
                        backoff *= 2;
                    }
                }
            }
        }
        Err(BackendError::Transport(format!("gave up after {attempts} attempts: {last}")))
    }
}
