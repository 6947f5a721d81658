use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::RwLock;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tracing::warn;

use super::{preview, BackendError, BackendIdentity};
use crate::io::{hash_fields, write_atomic};

/// One chat completion request: a system prompt, a user payload and
/// decoding parameters. Either message may be empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub system: String,
    pub user: String,
    pub temperature: f64,
}

impl ChatRequest {
    pub fn new(system: impl Into<String>, user: impl Into<String>) -> Self {
        Self { system: system.into(), user: user.into(), temperature: 0.0 }
    }

    /// Content hash over every field; mock fixtures are named by it.
    pub fn content_hash(&self) -> String {
        hash_fields([self.system.as_str(), self.user.as_str(), &format!("{:?}", self.temperature)])
    }
}

pub trait LlmBackend: Send + Sync {
    fn identity(&self) -> BackendIdentity;
    fn complete(&self, req: &ChatRequest) -> Result<String, BackendError>;
}

impl<T: LlmBackend + ?Sized> LlmBackend for std::sync::Arc<T> {
    fn identity(&self) -> BackendIdentity {
        (**self).identity()
    }
    fn complete(&self, req: &ChatRequest) -> Result<String, BackendError> {
        (**self).complete(req)
    }
}

/// Replays canned responses keyed by [`ChatRequest::content_hash`].
///
/// Responses come from an in-memory table first, then from
/// `<dir>/<hash>.txt`. Unknown requests are an error, never a guess.
#[derive(Debug, Default)]
pub struct MockLlm {
    dir: Option<PathBuf>,
    canned: RwLock<HashMap<String, String>>,
    calls: AtomicU64,
}

impl MockLlm {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_dir(dir: impl Into<PathBuf>) -> Self {
        Self { dir: Some(dir.into()), ..Self::default() }
    }

    pub fn with(self, req: &ChatRequest, response: impl Into<String>) -> Self {
        self.insert(req, response);
        self
    }

    pub fn insert(&self, req: &ChatRequest, response: impl Into<String>) {
        self.canned.write().unwrap().insert(req.content_hash(), response.into());
    }

    /// Writes a fixture file that [`MockLlm::from_dir`] will serve for `req`.
    pub fn write_fixture(dir: &Path, req: &ChatRequest, response: &str) -> std::io::Result<()> {
        write_atomic(&dir.join(format!("{}.txt", req.content_hash())), response.as_bytes())
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }
}

impl LlmBackend for MockLlm {
    fn identity(&self) -> BackendIdentity {
        BackendIdentity::new("mock", "fixture")
    }

    fn complete(&self, req: &ChatRequest) -> Result<String, BackendError> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        let hash = req.content_hash();
        if let Some(r) = self.canned.read().unwrap().get(&hash) {
            return Ok(r.clone());
        }
        if let Some(dir) = &self.dir {
            let path = dir.join(format!("{hash}.txt"));
            match std::fs::read_to_string(&path) {
                Ok(s) => return Ok(s),
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
                Err(source) => return Err(BackendError::Io { path: path.display().to_string(), source }),
            }
        }
        Err(BackendError::UnknownFixture { hash, hint: preview(&req.user) })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OpenAiChatConfig {
    pub base_url: String,
    pub model: String,
    /// Name of the environment variable holding the bearer token.
    pub api_key_env: String,
    pub timeout_secs: u64,
    pub max_attempts: u32,
}

impl Default for OpenAiChatConfig {
    fn default() -> Self {
        Self {
            base_url: "https://api.openai.com/v1".into(),
            model: "gpt-4o-mini".into(),
            api_key_env: "OPENAI_API_KEY".into(),
            timeout_secs: 120,
            max_attempts: 3,
        }
    }
}

/// Client for any server speaking the OpenAI chat-completions protocol.
pub struct OpenAiChat {
    config: OpenAiChatConfig,
    api_key: String,
    agent: ureq::Agent,
}

impl OpenAiChat {
    pub fn new(config: OpenAiChatConfig) -> Result<Self, BackendError> {
        let api_key = std::env::var(&config.api_key_env)
            .map_err(|_| BackendError::Config(format!("environment variable {} is not set", config.api_key_env)))?;
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_secs)))
            .build()
            .into();
        Ok(Self { config, api_key, agent })
    }

    pub fn request_body(&self, req: &ChatRequest) -> Value {
        let mut messages = Vec::new();
        if !req.system.is_empty() {
            messages.push(json!({"role": "system", "content": req.system}));
        }
        if !req.user.is_empty() {
            messages.push(json!({"role": "user", "content": req.user}));
        }
        json!({"model": self.config.model, "messages": messages, "temperature": req.temperature})
    }

    fn send_once(&self, body: &Value) -> Result<String, BackendError> {
        let url = format!("{}/chat/completions", self.config.base_url.trim_end_matches('/'));
        let mut resp = self
            .agent
            .post(&url)
            .header("Authorization", &format!("Bearer {}", self.api_key))
            .send_json(body)
            .map_err(|e| match e {
                ureq::Error::StatusCode(code) if code == 429 || code >= 500 => {
                    BackendError::Unavailable(format!("HTTP {code} from {url}"))
                }
                ureq::Error::StatusCode(code) => BackendError::Decode(format!("HTTP {code} from {url}")),
                other => BackendError::Unavailable(other.to_string()),
            })?;
        let value: Value = resp.body_mut().read_json().map_err(|e| BackendError::Decode(e.to_string()))?;
        extract_content(&value)
    }
}

pub(crate) fn extract_content(value: &Value) -> Result<String, BackendError> {
    value
        .pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .map(str::to_string)
        .ok_or_else(|| BackendError::Decode(format!("no choices[0].message.content in {}", preview(&value.to_string()))))
}

impl LlmBackend for OpenAiChat {
    fn identity(&self) -> BackendIdentity {
        BackendIdentity::new("openai-compatible", self.config.model.clone())
    }

    fn complete(&self, req: &ChatRequest) -> Result<String, BackendError> {
        let body = self.request_body(req);
        let mut attempt = 0;
        loop {
            attempt += 1;
            match self.send_once(&body) {
                Err(e) if e.is_retryable() && attempt < self.config.max_attempts => {
                    warn!(attempt, error = %e, "retrying chat completion");
                    std::thread::sleep(Duration::from_millis(500 * (1 << attempt)));
                }
                other => return other,
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mock_replays_and_rejects_unknown() {
        let req = ChatRequest::new("sys", "user");
        let mock = MockLlm::new().with(&req, "canned");
        assert_eq!(mock.complete(&req).unwrap(), "canned");
        let other = ChatRequest::new("sys", "other");
        assert!(matches!(mock.complete(&other), Err(BackendError::UnknownFixture { .. })));
        assert_eq!(mock.calls(), 2);
    }

    #[test]
    fn mock_reads_fixture_dir() {
        let dir = tempfile::tempdir().unwrap();
        let req = ChatRequest::new("a", "b");
        MockLlm::write_fixture(dir.path(), &req, "from disk").unwrap();
        assert_eq!(MockLlm::from_dir(dir.path()).complete(&req).unwrap(), "from disk");
    }

    #[test]
    fn hash_covers_temperature() {
        let mut a = ChatRequest::new("s", "u");
        let h0 = a.content_hash();
        a.temperature = 0.7;
        assert_ne!(h0, a.content_hash());
    }

    #[test]
    fn extracts_openai_content() {
        let v = json!({"choices": [{"message": {"role": "assistant", "content": "hi"}}]});
        assert_eq!(extract_content(&v).unwrap(), "hi");
        assert!(extract_content(&json!({"error": "x"})).is_err());
    }

    #[test]
    fn missing_key_is_config_error() {
        let cfg = OpenAiChatConfig { api_key_env: "HALLUSPAN_TEST_UNSET_KEY".into(), ..Default::default() };
        assert!(matches!(OpenAiChat::new(cfg), Err(BackendError::Config(_))));
    }
}
