//! Evidence gathering: search with the question itself, or with one query
//! per claim made in the answer.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use tracing::debug;

use crate::ask::ask_json;
use crate::backend::{ChatRequest, LlmBackend, Passage, SearchBackend};
use crate::dataset::Instance;
use crate::error::{Error, Result};
use crate::prompts::{claims_payload, CLAIM_EXTRACTION, TRANSLATION};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextMode {
    None,
    FromQuestion,
    FromClaims,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BundleMode {
    FromQuestion,
    FromClaims,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextBundle {
    pub instance_id: String,
    pub mode: BundleMode,
    pub queries: Vec<String>,
    pub passages: Vec<Passage>,
    pub translated: bool,
}

impl ContextBundle {
    /// Passages joined by blank lines, as inserted into prompts.
    pub fn text(&self) -> String {
        self.passages.iter().map(|p| p.text.as_str()).collect::<Vec<_>>().join("\n\n")
    }
}

/// Limits on retrieved material. `None` keeps everything the backend returns.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetrievalConfig {
    pub max_passages_per_query: Option<usize>,
    pub max_passage_chars: Option<usize>,
}

impl RetrievalConfig {
    fn trim(&self, mut passages: Vec<Passage>) -> Vec<Passage> {
        if let Some(n) = self.max_passages_per_query {
            passages.truncate(n);
        }
        if let Some(n) = self.max_passage_chars {
            for p in &mut passages {
                if let Some((b, _)) = p.text.char_indices().nth(n) {
                    p.text.truncate(b);
                }
            }
        }
        passages
    }
}

pub fn is_english(lang: &str) -> bool {
    lang.eq_ignore_ascii_case("en")
}

pub fn translate_to_english(text: &str, llm: &dyn LlmBackend) -> Result<String> {
    let out = llm.complete(&ChatRequest::new(TRANSLATION.render(&[]), text))?;
    Ok(out.trim().to_string())
}

/// Bundles the retrieval dependencies of one run.
pub struct Retriever<'a> {
    pub search: &'a dyn SearchBackend,
    pub llm: &'a dyn LlmBackend,
    pub translator: &'a dyn LlmBackend,
    pub translate: bool,
    pub config: &'a RetrievalConfig,
}

impl Retriever<'_> {
    fn prepare_query(&self, text: &str, lang: &str) -> Result<(String, bool)> {
        if self.translate && !is_english(lang) {
            Ok((translate_to_english(text, self.translator)?, true))
        } else {
            Ok((text.to_string(), false))
        }
    }

    pub fn context_from_question(&self, inst: &Instance) -> Result<ContextBundle> {
        if inst.question.trim().is_empty() {
            return Err(Error::Precondition(format!("instance {} has an empty question", inst.id)));
        }
        let (query, translated) = self.prepare_query(&inst.question, &inst.lang)?;
        let passages = self.config.trim(self.search.search(&query)?);
        if passages.is_empty() {
            return Err(Error::EmptyResult(query));
        }
        Ok(ContextBundle {
            instance_id: inst.id.clone(),
            mode: BundleMode::FromQuestion,
            queries: vec![query],
            passages,
            translated,
        })
    }

    /// One search per extracted claim, passages deduplicated by exact text.
    /// Falls back to the question when the answer yields no claims.
    pub fn context_from_claims(&self, inst: &Instance) -> Result<ContextBundle> {
        let claims = extract_claims(inst, self.llm)?;
        if claims.is_empty() {
            debug!(id = %inst.id, "no claims extracted, searching with the question");
            return self.context_from_question(inst);
        }
        let mut queries = Vec::with_capacity(claims.len());
        let mut passages = Vec::new();
        let mut seen = HashSet::new();
        let mut translated = false;
        for claim in &claims {
            let (query, t) = self.prepare_query(claim, &inst.lang)?;
            translated |= t;
            for p in self.config.trim(self.search.search(&query)?) {
                if seen.insert(p.text.clone()) {
                    passages.push(p);
                }
            }
            queries.push(query);
        }
        if passages.is_empty() {
            return Err(Error::EmptyResult(queries.join(" | ")));
        }
        Ok(ContextBundle { instance_id: inst.id.clone(), mode: BundleMode::FromClaims, queries, passages, translated })
    }

    pub fn retrieve(&self, inst: &Instance, mode: ContextMode) -> Result<Option<ContextBundle>> {
        match mode {
            ContextMode::None => Ok(None),
            ContextMode::FromQuestion => self.context_from_question(inst).map(Some),
            ContextMode::FromClaims => self.context_from_claims(inst).map(Some),
        }
    }
}

pub const CLAIMS_SCHEMA: &str = r#"["[first claim]", "[second claim]"]"#;

fn parse_claims(v: &Value) -> std::result::Result<Vec<String>, String> {
    let arr = match v {
        Value::Array(a) => a,
        Value::Object(o) => o
            .get("claims")
            .and_then(Value::as_array)
            .ok_or("expected a JSON array of claims")?,
        _ => return Err("expected a JSON array of claims".into()),
    };
    arr.iter()
        .map(|c| c.as_str().map(|s| s.trim().to_string()).ok_or_else(|| format!("claim {c} is not a string")))
        .filter(|c| c.as_ref().map_or(true, |s| !s.is_empty()))
        .collect()
}

pub fn claims_request(inst: &Instance) -> ChatRequest {
    ChatRequest::new(CLAIM_EXTRACTION.render(&[]), claims_payload(&inst.question, &inst.answer))
}

/// Splits the answer into atomic declarative claims. May return an empty
/// list for answers that assert nothing.
pub fn extract_claims(inst: &Instance, llm: &dyn LlmBackend) -> Result<Vec<String>> {
    if inst.answer.trim().is_empty() {
        return Err(Error::Precondition(format!("instance {} has an empty answer", inst.id)));
    }
    let (claims, _) = ask_json(llm, "claim extraction", &claims_request(inst), CLAIMS_SCHEMA, parse_claims)?;
    Ok(claims)
}
