//! Pluggable external services: chat LLMs, search engines and the response
//! cache that sits in front of both.

mod cache;
mod llm;
mod search;

pub use cache::{Cache, CacheStats, CachedLlm, CachedSearch};
pub use llm::{ChatRequest, LlmBackend, MockLlm, OpenAiChat, OpenAiChatConfig};
pub use search::{HttpSearch, HttpSearchConfig, LlmSearch, MockSearch, Passage, SearchBackend};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("backend unavailable: {0}")]
    Unavailable(String),
    #[error("no mock fixture for request {hash} ({hint})")]
    UnknownFixture { hash: String, hint: String },
    #[error("unexpected response: {0}")]
    Decode(String),
    #[error("backend misconfigured: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

impl BackendError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, BackendError::Unavailable(_))
    }
}

/// Who answered a request; recorded in cache entries and run manifests.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct BackendIdentity {
    pub provider: String,
    pub model: String,
}

impl BackendIdentity {
    pub fn new(provider: impl Into<String>, model: impl Into<String>) -> Self {
        Self { provider: provider.into(), model: model.into() }
    }
}

impl std::fmt::Display for BackendIdentity {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}:{}", self.provider, self.model)
    }
}

fn preview(text: &str) -> String {
    let mut s: String = text.chars().take(60).collect();
    if s.len() < text.len() {
        s.push('…');
    }
    s.replace('\n', " ")
}
