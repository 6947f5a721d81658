//! Structured LLM calls with a single bounded repair attempt.

use serde_json::Value;

use crate::backend::{ChatRequest, LlmBackend};
use crate::error::{Error, Result};
use crate::prompts::{extract_tag, parse_json_reply, JSON_REPAIR};

/// Every raw reply received while answering one structured question.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Exchange {
    pub raw: Vec<String>,
    pub retries: u32,
}

fn repair_request(req: &ChatRequest, reply: &str, error: &str, schema: &str) -> ChatRequest {
    let note = JSON_REPAIR.render(&[("error", error), ("response", reply), ("schema", schema)]);
    let user = if req.user.is_empty() { note } else { format!("{}\n\n{note}", req.user) };
    ChatRequest { user, ..req.clone() }
}

/// Sends `req`, parses the reply as JSON with `parse`, and on failure
/// re-prompts once with the malformed reply and `schema`.
pub fn ask_json<T>(
    llm: &dyn LlmBackend,
    stage: &'static str,
    req: &ChatRequest,
    schema: &str,
    parse: impl Fn(&Value) -> std::result::Result<T, String>,
) -> Result<(T, Exchange)> {
    let mut ex = Exchange::default();
    let attempt = |reply: &str| parse_json_reply(reply).and_then(|v| parse(&v));
    let first = llm.complete(req)?;
    ex.raw.push(first.clone());
    let err = match attempt(&first) {
        Ok(v) => return Ok((v, ex)),
        Err(e) => e,
    };
    ex.retries = 1;
    let second = llm.complete(&repair_request(req, &first, &err, schema))?;
    ex.raw.push(second.clone());
    match attempt(&second) {
        Ok(v) => Ok((v, ex)),
        Err(message) => Err(Error::LlmParse { stage, message, retries: ex.retries, raw: ex.raw }),
    }
}

/// Like [`ask_json`] but expects the answer inside `<tag>…</tag>`. The
/// enclosed text is returned trimmed; an empty block counts as missing.
pub fn ask_tagged(llm: &dyn LlmBackend, stage: &'static str, req: &ChatRequest, tag: &'static str) -> Result<(String, Exchange)> {
    let mut ex = Exchange::default();
    let pick = |reply: &str| extract_tag(reply, tag).map(str::trim).filter(|s| !s.is_empty()).map(str::to_string);
    let first = llm.complete(req)?;
    ex.raw.push(first.clone());
    if let Some(v) = pick(&first) {
        return Ok((v, ex));
    }
    ex.retries = 1;
    let schema = format!("<{tag}>...</{tag}>");
    let second = llm.complete(&repair_request(req, &first, &format!("no <{tag}> block found"), &schema))?;
    ex.raw.push(second.clone());
    match pick(&second) {
        Some(v) => Ok((v, ex)),
        None => Err(Error::MissingTag { stage, tag, retries: ex.retries, raw: ex.raw }),
    }
}
