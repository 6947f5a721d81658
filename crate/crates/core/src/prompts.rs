//! Prompt templates and reply parsing.
//!
//! Templates are text assets under `prompts/`. Placeholders use `{name}`;
//! literal braces are doubled (`{{`, `}}`). Each template carries a version
//! derived from its content so run manifests pin the exact wording used.

use std::collections::BTreeMap;

use serde_json::Value;

use crate::io::sha256_hex;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Template {
    pub name: &'static str,
    pub text: &'static str,
}

macro_rules! template {
    ($ident:ident, $name:literal) => {
        pub const $ident: Template = Template { name: $name, text: include_str!(concat!("../prompts/", $name, ".txt")) };
    };
}

template!(TEXT_EXTRACTION, "text_extraction");
template!(TEXT_EXTRACTION_NO_CONTEXT, "text_extraction_no_context");
template!(MIN_COST_REVISION, "min_cost_revision");
template!(CLAIM_EXTRACTION, "claim_extraction");
template!(TRANSLATION, "translation");
template!(KG_CONSTRUCTION, "kg_construction");
template!(KG_VERIFICATION, "kg_verification");
template!(FACT_TO_SPAN, "fact_to_span");
template!(JSON_REPAIR, "json_repair");
template!(INSTRUCTION_PROPOSAL, "instruction_proposal");

pub const ALL: [Template; 10] = [
    TEXT_EXTRACTION,
    TEXT_EXTRACTION_NO_CONTEXT,
    MIN_COST_REVISION,
    CLAIM_EXTRACTION,
    TRANSLATION,
    KG_CONSTRUCTION,
    KG_VERIFICATION,
    FACT_TO_SPAN,
    JSON_REPAIR,
    INSTRUCTION_PROPOSAL,
];

impl Template {
    pub fn version(&self) -> String {
        format!("v1-{}", &sha256_hex(self.text)[..12])
    }

    pub fn render(&self, vars: &[(&str, &str)]) -> String {
        render(self.text, vars)
    }
}

/// Template name → version, for run manifests.
pub fn versions() -> BTreeMap<String, String> {
    ALL.iter().map(|t| (t.name.to_string(), t.version())).collect()
}

/// Substitutes `{name}` placeholders and unescapes doubled braces. Braces
/// that do not form a known placeholder are kept as written.
pub fn render(text: &str, vars: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(text.len());
    let mut rest = text;
    while let Some(pos) = rest.find(['{', '}']) {
        out.push_str(&rest[..pos]);
        let tail = &rest[pos..];
        if tail.starts_with("{{") || tail.starts_with("}}") {
            out.push_str(&tail[..1]);
            rest = &tail[2..];
            continue;
        }
        if tail.starts_with('{') {
            if let Some(close) = tail.find('}') {
                let name = &tail[1..close];
                if let Some((_, v)) = vars.iter().find(|(k, _)| *k == name) {
                    out.push_str(v);
                    rest = &tail[close + 1..];
                    continue;
                }
            }
        }
        out.push_str(&tail[..1]);
        rest = &tail[1..];
    }
    out.push_str(rest);
    out
}

/// User payload for the context-grounded extraction prompt, in the same
/// tagged layout as the prompt's worked example.
pub fn extraction_payload(context: &str, question: &str, answer: &str) -> String {
    format!("<context>\n{context}\n</context>\n\n<question>\n{question}\n</question>\n\n<answer>\n{answer}\n</answer>")
}

/// User payload for the extraction prompt when no context is available.
pub fn extraction_payload_no_context(question: &str, answer: &str) -> String {
    format!("Question: \"{question}\"\nAnswer: \"{answer}\"")
}

pub fn claims_payload(question: &str, answer: &str) -> String {
    format!("<question>\n{question}\n</question>\n\n<answer>\n{answer}\n</answer>")
}

/// Pulls the first JSON value out of a model reply. Accepts bare JSON,
/// fenced ```json blocks, and JSON surrounded by prose.
pub fn parse_json_reply(reply: &str) -> Result<Value, String> {
    let trimmed = reply.trim();
    if let Ok(v) = serde_json::from_str(trimmed) {
        return Ok(v);
    }
    let body = fenced_block(trimmed).unwrap_or(trimmed);
    let start = body
        .find(['{', '['])
        .ok_or_else(|| "reply contains no JSON object or array".to_string())?;
    let mut stream = serde_json::Deserializer::from_str(&body[start..]).into_iter::<Value>();
    match stream.next() {
        Some(Ok(v)) => Ok(v),
        Some(Err(e)) => Err(format!("invalid JSON: {e}")),
        None => Err("reply contains no JSON value".into()),
    }
}

fn fenced_block(text: &str) -> Option<&str> {
    let open = text.find("```")?;
    let after = &text[open + 3..];
    let body_start = after.find('\n').map_or(0, |i| i + 1);
    let body = &after[body_start..];
    let close = body.find("```")?;
    Some(&body[..close])
}

/// Text between the first `<tag>` and the following `</tag>`, if both exist.
pub fn extract_tag<'a>(reply: &'a str, tag: &str) -> Option<&'a str> {
    let open = format!("<{tag}>");
    let close = format!("</{tag}>");
    let start = reply.find(&open)? + open.len();
    let end = reply[start..].find(&close)? + start;
    Some(&reply[start..end])
}
