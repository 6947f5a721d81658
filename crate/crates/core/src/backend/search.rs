use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::RwLock;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{preview, BackendError, BackendIdentity, ChatRequest, LlmBackend};
use crate::io::{sha256_hex, write_atomic};

/// A retrieved piece of evidence and where it came from.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Passage {
    pub source: String,
    pub text: String,
}

impl Passage {
    pub fn new(source: impl Into<String>, text: impl Into<String>) -> Self {
        Self { source: source.into(), text: text.into() }
    }
}

pub trait SearchBackend: Send + Sync {
    fn identity(&self) -> BackendIdentity;
    fn search(&self, query: &str) -> Result<Vec<Passage>, BackendError>;
}

impl<T: SearchBackend + ?Sized> SearchBackend for std::sync::Arc<T> {
    fn identity(&self) -> BackendIdentity {
        (**self).identity()
    }
    fn search(&self, query: &str) -> Result<Vec<Passage>, BackendError> {
        (**self).search(query)
    }
}

/// Serves passages from memory or from `<dir>/<sha256(query)>.json`.
#[derive(Debug, Default)]
pub struct MockSearch {
    dir: Option<PathBuf>,
    canned: RwLock<HashMap<String, Vec<Passage>>>,
    calls: AtomicU64,
}

impl MockSearch {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_dir(dir: impl Into<PathBuf>) -> Self {
        Self { dir: Some(dir.into()), ..Self::default() }
    }

    pub fn with(self, query: &str, passages: Vec<Passage>) -> Self {
        self.canned.write().unwrap().insert(query.to_string(), passages);
        self
    }

    pub fn fixture_name(query: &str) -> String {
        format!("{}.json", sha256_hex(query))
    }

    pub fn write_fixture(dir: &Path, query: &str, passages: &[Passage]) -> std::io::Result<()> {
        let body = serde_json::to_vec_pretty(passages).expect("passages serialize");
        write_atomic(&dir.join(Self::fixture_name(query)), &body)
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }
}

impl SearchBackend for MockSearch {
    fn identity(&self) -> BackendIdentity {
        BackendIdentity::new("mock-search", "fixture")
    }

    fn search(&self, query: &str) -> Result<Vec<Passage>, BackendError> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        if let Some(p) = self.canned.read().unwrap().get(query) {
            return Ok(p.clone());
        }
        if let Some(dir) = &self.dir {
            let path = dir.join(Self::fixture_name(query));
            match std::fs::read(&path) {
                Ok(bytes) => {
                    return serde_json::from_slice(&bytes)
                        .map_err(|e| BackendError::Decode(format!("{}: {e}", path.display())))
                }
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
                Err(source) => return Err(BackendError::Io { path: path.display().to_string(), source }),
            }
        }
        Err(BackendError::UnknownFixture { hash: sha256_hex(query), hint: preview(query) })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HttpSearchConfig {
    pub endpoint: String,
    /// Query-string parameter carrying the search text.
    pub query_param: String,
    /// Environment variable with the API key; empty for unauthenticated APIs.
    pub api_key_env: String,
    pub api_key_header: String,
    /// JSON pointer to the result array in the response.
    pub results_pointer: String,
    pub text_field: String,
    pub source_field: String,
    pub timeout_secs: u64,
}

impl Default for HttpSearchConfig {
    fn default() -> Self {
        Self {
            endpoint: String::new(),
            query_param: "q".into(),
            api_key_env: String::new(),
            api_key_header: "X-API-Key".into(),
            results_pointer: "/results".into(),
            text_field: "text".into(),
            source_field: "url".into(),
            timeout_secs: 60,
        }
    }
}

/// Generic JSON search API: `GET endpoint?q=...`, results at a JSON pointer.
pub struct HttpSearch {
    config: HttpSearchConfig,
    api_key: Option<String>,
    agent: ureq::Agent,
}

impl HttpSearch {
    pub fn new(config: HttpSearchConfig) -> Result<Self, BackendError> {
        if config.endpoint.is_empty() {
            return Err(BackendError::Config("search endpoint is empty".into()));
        }
        let api_key = if config.api_key_env.is_empty() {
            None
        } else {
            Some(std::env::var(&config.api_key_env).map_err(|_| {
                BackendError::Config(format!("environment variable {} is not set", config.api_key_env))
            })?)
        };
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_secs)))
            .build()
            .into();
        Ok(Self { config, api_key, agent })
    }

    pub fn parse_results(&self, value: &Value) -> Result<Vec<Passage>, BackendError> {
        parse_results(&self.config, value)
    }
}

fn parse_results(config: &HttpSearchConfig, value: &Value) -> Result<Vec<Passage>, BackendError> {
    let items = value
        .pointer(&config.results_pointer)
        .and_then(Value::as_array)
        .ok_or_else(|| BackendError::Decode(format!("no array at {}", config.results_pointer)))?;
    Ok(items
        .iter()
        .filter_map(|item| {
            let text = item.get(&config.text_field)?.as_str()?;
            let source = item.get(&config.source_field).and_then(Value::as_str).unwrap_or("");
            (!text.trim().is_empty()).then(|| Passage::new(source, text))
        })
        .collect())
}

impl SearchBackend for HttpSearch {
    fn identity(&self) -> BackendIdentity {
        BackendIdentity::new("http-search", self.config.endpoint.clone())
    }

    fn search(&self, query: &str) -> Result<Vec<Passage>, BackendError> {
        let mut req = self.agent.get(&self.config.endpoint).query(&self.config.query_param, query);
        if let Some(key) = &self.api_key {
            req = req.header(&self.config.api_key_header, key);
        }
        let mut resp = req.call().map_err(|e| match e {
            ureq::Error::StatusCode(code) if code == 429 || code >= 500 => {
                BackendError::Unavailable(format!("HTTP {code} from search"))
            }
            ureq::Error::StatusCode(code) => BackendError::Decode(format!("HTTP {code} from search")),
            other => BackendError::Unavailable(other.to_string()),
        })?;
        let value: Value = resp.body_mut().read_json().map_err(|e| BackendError::Decode(e.to_string()))?;
        parse_results(&self.config, &value)
    }
}

/// Uses an answer-engine style chat model as the search backend: the query
/// goes in as the user message and the reply is the single passage.
pub struct LlmSearch<L> {
    llm: L,
}

impl<L: LlmBackend> LlmSearch<L> {
    pub fn new(llm: L) -> Self {
        Self { llm }
    }
}

impl<L: LlmBackend> SearchBackend for LlmSearch<L> {
    fn identity(&self) -> BackendIdentity {
        let id = self.llm.identity();
        BackendIdentity::new(format!("llm-search/{}", id.provider), id.model)
    }

    fn search(&self, query: &str) -> Result<Vec<Passage>, BackendError> {
        let text = self.llm.complete(&ChatRequest::new("", query))?;
        if text.trim().is_empty() {
            return Ok(Vec::new());
        }
        Ok(vec![Passage::new(self.llm.identity().to_string(), text)])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::MockLlm;
    use serde_json::json;

    #[test]
    fn mock_search_memory_and_disk() {
        let dir = tempfile::tempdir().unwrap();
        let p = vec![Passage::new("wiki", "Paris is the capital of France.")];
        MockSearch::write_fixture(dir.path(), "capital of France", &p).unwrap();
        let m = MockSearch::from_dir(dir.path()).with("x", vec![]);
        assert_eq!(m.search("capital of France").unwrap(), p);
        assert!(m.search("x").unwrap().is_empty());
        assert!(matches!(m.search("y"), Err(BackendError::UnknownFixture { .. })));
    }

    #[test]
    fn http_result_parsing() {
        let cfg = HttpSearchConfig { results_pointer: "/data/items".into(), ..Default::default() };
        let v = json!({"data": {"items": [
            {"text": "one", "url": "u1"},
            {"text": "  ", "url": "u2"},
            {"snippet": "no text"},
        ]}});
        assert_eq!(parse_results(&cfg, &v).unwrap(), vec![Passage::new("u1", "one")]);
        assert!(parse_results(&cfg, &json!({})).is_err());
    }

    #[test]
    fn llm_search_wraps_reply() {
        let llm = MockLlm::new().with(&ChatRequest::new("", "q"), "answer text");
        let s = LlmSearch::new(llm);
        assert_eq!(s.search("q").unwrap(), vec![Passage::new("mock:fixture", "answer text")]);
    }
}
