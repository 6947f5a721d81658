//! The three ways of asking an LLM what is wrong with an answer.
//!
//! * direct: the model quotes the unsupported text spans itself;
//! * kg: context becomes a triple graph, the answer becomes atomic facts,
//!   and each fact is checked against the triples about its entities;
//! * min_revision: the model minimally corrects the answer and the diff is
//!   mapped later.
//!
//! Every [`Detection`] keeps the raw replies it was built from.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use tracing::warn;

use crate::ask::{ask_json, ask_tagged, Exchange};
use crate::backend::{ChatRequest, LlmBackend};
use crate::dataset::Instance;
use crate::error::{Error, Result};
use crate::prompts::{
    extraction_payload, extraction_payload_no_context, KG_CONSTRUCTION, KG_VERIFICATION, MIN_COST_REVISION,
    TEXT_EXTRACTION, TEXT_EXTRACTION_NO_CONTEXT,
};
use crate::retrieval::{extract_claims, ContextBundle};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectorKind {
    Direct,
    Kg,
    MinRevision,
}

impl std::fmt::Display for DetectorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DetectorKind::Direct => "direct",
            DetectorKind::Kg => "kg",
            DetectorKind::MinRevision => "min_revision",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractedSpan {
    pub text: String,
    pub prob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    ExtractedSpans(Vec<ExtractedSpan>),
    FalseFacts(Vec<String>),
    CorrectedAnswer(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub detector: DetectorKind,
    pub verdict: Verdict,
    pub raw_outputs: Vec<String>,
    pub retries: u32,
    pub warnings: Vec<String>,
}

pub const INCORRECT_SPANS_SCHEMA: &str =
    r#"{"incorrect_spans": [{"text": "[identified incorrect span]", "probability": [confidence_score]}]}"#;

/// The request the direct detector sends, with an optional replacement for
/// the system instruction.
pub fn direct_request(ctx: Option<&ContextBundle>, inst: &Instance, instruction: Option<&str>) -> ChatRequest {
    match ctx {
        Some(c) => ChatRequest::new(
            instruction.map_or_else(|| TEXT_EXTRACTION.render(&[]), str::to_string),
            extraction_payload(&c.text(), &inst.question, &inst.answer),
        ),
        None => ChatRequest::new(
            instruction.map_or_else(|| TEXT_EXTRACTION_NO_CONTEXT.render(&[]), str::to_string),
            extraction_payload_no_context(&inst.question, &inst.answer),
        ),
    }
}

fn parse_prob(v: Option<&Value>) -> std::result::Result<f64, String> {
    match v {
        None | Some(Value::Null) => Ok(1.0),
        Some(Value::Number(n)) => n.as_f64().ok_or_else(|| format!("bad probability {n}")),
        Some(Value::String(s)) => s.trim().parse().map_err(|_| format!("bad probability {s:?}")),
        Some(other) => Err(format!("bad probability {other}")),
    }
}

/// Parses an `incorrect_spans` reply into raw (text, probability) pairs.
pub fn parse_incorrect_spans(v: &Value) -> std::result::Result<Vec<(String, f64)>, String> {
    let arr = v
        .get("incorrect_spans")
        .and_then(Value::as_array)
        .ok_or("missing `incorrect_spans` array")?;
    arr.iter()
        .map(|item| {
            let text = item
                .get("text")
                .and_then(Value::as_str)
                .ok_or_else(|| format!("span {item} has no string `text`"))?;
            Ok((text.to_string(), parse_prob(item.get("probability"))?))
        })
        .collect()
}

fn sanitize_spans(raw: Vec<(String, f64)>, warnings: &mut Vec<String>) -> Vec<ExtractedSpan> {
    raw.into_iter()
        .filter_map(|(text, p)| {
            if text.is_empty() {
                warnings.push("dropped empty extracted span".into());
                return None;
            }
            let prob = if p.is_nan() { 0.0 } else { p.clamp(0.0, 1.0) };
            if prob != p {
                warn!(text = %text, prob = p, "clamping extraction probability");
                warnings.push(format!("clamped probability {p} of {text:?} to {prob}"));
            }
            Some(ExtractedSpan { text, prob })
        })
        .collect()
}

pub fn detect_direct(ctx: Option<&ContextBundle>, inst: &Instance, llm: &dyn LlmBackend) -> Result<Detection> {
    detect_direct_with(ctx, inst, llm, None)
}

/// Direct extraction with an optional custom system instruction (used by
/// the prompt optimizer and by deployed optimized prompts).
pub fn detect_direct_with(
    ctx: Option<&ContextBundle>,
    inst: &Instance,
    llm: &dyn LlmBackend,
    instruction: Option<&str>,
) -> Result<Detection> {
    if inst.answer.is_empty() {
        return Err(Error::Precondition(format!("instance {} has an empty answer", inst.id)));
    }
    let req = direct_request(ctx, inst, instruction);
    let (raw, ex) = ask_json(llm, "text extraction", &req, INCORRECT_SPANS_SCHEMA, parse_incorrect_spans)?;
    let mut warnings = Vec::new();
    let spans = sanitize_spans(raw, &mut warnings);
    Ok(Detection {
        detector: DetectorKind::Direct,
        verdict: Verdict::ExtractedSpans(spans),
        raw_outputs: ex.raw,
        retries: ex.retries,
        warnings,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Triple {
    pub subject: String,
    pub relation: String,
    pub object: String,
    /// Index of the passage the triple was extracted from.
    pub passage: usize,
}

/// Per-instance graph: a flat list of triples.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeGraph {
    pub triples: Vec<Triple>,
}

impl KnowledgeGraph {
    /// Triples whose subject or object is mentioned (case-insensitively) in `text`.
    pub fn about(&self, text: &str) -> Vec<&Triple> {
        let hay = text.to_lowercase();
        let mentioned = |e: &str| {
            let e = e.trim().to_lowercase();
            !e.is_empty() && hay.contains(&e)
        };
        self.triples.iter().filter(|t| mentioned(&t.subject) || mentioned(&t.object)).collect()
    }
}

pub const TRIPLES_SCHEMA: &str = r#"{"triples": [{"subject": "[entity]", "relation": "[relation]", "object": "[entity]"}]}"#;

fn parse_triples(v: &Value) -> std::result::Result<Vec<(String, String, String)>, String> {
    let arr = v.get("triples").and_then(Value::as_array).ok_or("missing `triples` array")?;
    arr.iter()
        .map(|t| {
            let field = |k: &str| {
                t.get(k)
                    .and_then(Value::as_str)
                    .map(|s| s.trim().to_string())
                    .ok_or_else(|| format!("triple {t} has no string `{k}`"))
            };
            Ok((field("subject")?, field("relation")?, field("object")?))
        })
        .collect()
}

pub fn kg_request(passage: &str) -> ChatRequest {
    ChatRequest::new(KG_CONSTRUCTION.render(&[]), passage)
}

/// Builds the graph with one extraction call per passage.
pub fn build_kg(ctx: &ContextBundle, llm: &dyn LlmBackend) -> Result<(KnowledgeGraph, Exchange)> {
    if ctx.passages.is_empty() {
        return Err(Error::Precondition("cannot build a knowledge graph without passages".into()));
    }
    let mut graph = KnowledgeGraph::default();
    let mut seen = HashSet::new();
    let mut all = Exchange::default();
    for (i, p) in ctx.passages.iter().enumerate() {
        let (triples, ex) = ask_json(llm, "kg construction", &kg_request(&p.text), TRIPLES_SCHEMA, parse_triples)?;
        all.raw.extend(ex.raw);
        all.retries += ex.retries;
        for (subject, relation, object) in triples {
            if seen.insert((subject.clone(), relation.clone(), object.clone())) {
                graph.triples.push(Triple { subject, relation, object, passage: i });
            }
        }
    }
    Ok((graph, all))
}

pub fn format_triples(triples: &[&Triple]) -> String {
    triples
        .iter()
        .map(|t| format!("({}, {}, {})", t.subject, t.relation, t.object))
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn verification_request(fact: &str, triples: &[&Triple]) -> ChatRequest {
    ChatRequest::new(KG_VERIFICATION.render(&[("triples", &format_triples(triples)), ("fact", fact)]), "")
}

pub const VERDICT_SCHEMA: &str = r#"{"verdict": "supported" | "contradicted" | "unsupported"}"#;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FactStatus {
    Supported,
    Contradicted,
    Unsupported,
}

fn parse_verdict(v: &Value) -> std::result::Result<FactStatus, String> {
    match v.get("verdict").and_then(Value::as_str).map(|s| s.trim().to_lowercase()) {
        Some(s) if s == "supported" => Ok(FactStatus::Supported),
        Some(s) if s == "contradicted" => Ok(FactStatus::Contradicted),
        Some(s) if s == "unsupported" => Ok(FactStatus::Unsupported),
        Some(s) => Err(format!("unknown verdict {s:?}")),
        None => Err("missing `verdict`".into()),
    }
}

/// Checks each atomic fact of the answer against the context graph. Facts
/// whose entities do not occur in the graph are reported as unsupported
/// without asking the model.
pub fn detect_kg(ctx: &ContextBundle, inst: &Instance, llm: &dyn LlmBackend) -> Result<Detection> {
    let (graph, mut ex) = build_kg(ctx, llm)?;
    let facts = extract_claims(inst, llm)?;
    let mut warnings = Vec::new();
    let mut flagged = Vec::new();
    for fact in facts {
        let relevant = graph.about(&fact);
        if relevant.is_empty() {
            warnings.push(format!("no graph entity for fact {fact:?}; treated as unsupported"));
            flagged.push(fact);
            continue;
        }
        let (status, fx) = ask_json(llm, "kg verification", &verification_request(&fact, &relevant), VERDICT_SCHEMA, parse_verdict)?;
        ex.raw.extend(fx.raw);
        ex.retries += fx.retries;
        if status != FactStatus::Supported {
            flagged.push(fact);
        }
    }
    Ok(Detection {
        detector: DetectorKind::Kg,
        verdict: Verdict::FalseFacts(flagged),
        raw_outputs: ex.raw,
        retries: ex.retries,
        warnings,
    })
}

pub fn revision_request(ctx: Option<&ContextBundle>, inst: &Instance) -> ChatRequest {
    let context = ctx.map(ContextBundle::text).unwrap_or_default();
    ChatRequest::new(
        MIN_COST_REVISION.render(&[("context", &context), ("question", &inst.question), ("answer", &inst.answer)]),
        "",
    )
}

pub fn detect_min_revision(ctx: Option<&ContextBundle>, inst: &Instance, llm: &dyn LlmBackend) -> Result<Detection> {
    if inst.answer.is_empty() {
        return Err(Error::Precondition(format!("instance {} has an empty answer", inst.id)));
    }
    let (corrected, ex) = ask_tagged(llm, "minimum cost revision", &revision_request(ctx, inst), "corrected_answer")?;
    Ok(Detection {
        detector: DetectorKind::MinRevision,
        verdict: Verdict::CorrectedAnswer(corrected),
        raw_outputs: ex.raw,
        retries: ex.retries,
        warnings: Vec::new(),
    })
}
