//! Task JSONL records and the prediction file format.
//!
//! All offsets in files are character offsets into the answer text. Unknown
//! keys on instance records are kept in [`Instance::extra`] and written back
//! after the known keys, in their original order.

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use thiserror::Error;

use crate::io::write_atomic;
use crate::span::{char_len, CharSpan, SoftSpan, SpanError, SpanSet};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("line {line}: missing field `{name}`")]
    MissingField { line: usize, name: String },
    #[error("line {line}: {source}")]
    Label { line: usize, source: SpanError },
    #[error("line {line}: {msg}")]
    Invalid { line: usize, msg: String },
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

impl DataError {
    pub fn line(&self) -> Option<usize> {
        match self {
            DataError::Parse { line, .. }
            | DataError::MissingField { line, .. }
            | DataError::Label { line, .. }
            | DataError::Invalid { line, .. } => Some(*line),
            DataError::Io { .. } => None,
        }
    }
}

/// JSON key names used by the task files. Kept configurable so renamed task
/// releases load without code changes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct KeyMap {
    pub id: String,
    pub lang: String,
    pub question: String,
    pub answer: String,
    pub model: String,
    pub hard_labels: String,
    pub soft_labels: String,
    pub annotator_labels: String,
}

impl Default for KeyMap {
    fn default() -> Self {
        Self {
            id: "id".into(),
            lang: "lang".into(),
            question: "model_input".into(),
            answer: "model_output_text".into(),
            model: "model_id".into(),
            hard_labels: "hard_labels".into(),
            soft_labels: "soft_labels".into(),
            annotator_labels: "annotator_labels".into(),
        }
    }
}

/// One audited question/answer pair, optionally with gold labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub id: String,
    pub lang: String,
    pub question: String,
    pub answer: String,
    pub producing_model: String,
    pub gold_hard: Option<SpanSet>,
    pub gold_soft: Option<Vec<SoftSpan>>,
    /// Per-annotator hard labels, when the split ships them.
    pub annotator_sets: Option<Vec<SpanSet>>,
    pub extra: Map<String, Value>,
}

impl Instance {
    pub fn new(id: impl Into<String>, lang: impl Into<String>, question: impl Into<String>, answer: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            lang: lang.into(),
            question: question.into(),
            answer: answer.into(),
            producing_model: String::new(),
            gold_hard: None,
            gold_soft: None,
            annotator_sets: None,
            extra: Map::new(),
        }
    }

    pub fn answer_len(&self) -> usize {
        char_len(&self.answer)
    }

    pub fn to_json(&self, keys: &KeyMap) -> Value {
        let mut obj = Map::new();
        obj.insert(keys.id.clone(), json!(self.id));
        obj.insert(keys.lang.clone(), json!(self.lang));
        obj.insert(keys.question.clone(), json!(self.question));
        obj.insert(keys.answer.clone(), json!(self.answer));
        obj.insert(keys.model.clone(), json!(self.producing_model));
        if let Some(h) = &self.gold_hard {
            obj.insert(keys.hard_labels.clone(), json!(h.pairs()));
        }
        if let Some(s) = &self.gold_soft {
            obj.insert(keys.soft_labels.clone(), soft_to_json(s));
        }
        if let Some(a) = &self.annotator_sets {
            obj.insert(keys.annotator_labels.clone(), Value::Array(a.iter().map(|s| json!(s.pairs())).collect()));
        }
        for (k, v) in &self.extra {
            obj.insert(k.clone(), v.clone());
        }
        Value::Object(obj)
    }

    pub fn from_json(value: Value, keys: &KeyMap, line: usize) -> Result<Self, DataError> {
        let Value::Object(mut obj) = value else {
            return Err(DataError::Parse { line, msg: "expected a JSON object".into() });
        };
        let mut take_str = |name: &str, required: bool| -> Result<String, DataError> {
            match obj.shift_remove(name) {
                Some(Value::String(s)) => Ok(s),
                Some(other) => Err(DataError::Invalid { line, msg: format!("field `{name}` must be a string, got {other}") }),
                None if required => Err(DataError::MissingField { line, name: name.to_string() }),
                None => Ok(String::new()),
            }
        };
        let id = take_str(&keys.id, true)?;
        let lang = take_str(&keys.lang, true)?;
        let question = take_str(&keys.question, true)?;
        let answer = take_str(&keys.answer, true)?;
        let producing_model = take_str(&keys.model, false)?;
        if answer.is_empty() {
            return Err(DataError::Invalid { line, msg: "answer text is empty".into() });
        }
        let len = char_len(&answer);
        let gold_hard = obj
            .shift_remove(&keys.hard_labels)
            .map(|v| parse_hard(&v, len, line))
            .transpose()?;
        let gold_soft = obj
            .shift_remove(&keys.soft_labels)
            .map(|v| parse_soft(&v, len, line, false))
            .transpose()?;
        let annotator_sets = obj
            .shift_remove(&keys.annotator_labels)
            .map(|v| match v {
                Value::Array(sets) => sets.iter().map(|s| parse_hard(s, len, line)).collect(),
                _ => Err(DataError::Invalid { line, msg: "annotator labels must be an array of span lists".into() }),
            })
            .transpose()?;
        Ok(Self { id, lang, question, answer, producing_model, gold_hard, gold_soft, annotator_sets, extra: obj })
    }
}

/// A system's labels for one instance.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub id: String,
    pub hard: SpanSet,
    /// Pairwise disjoint, ordered by start.
    pub soft: Vec<SoftSpan>,
}

impl Prediction {
    pub fn empty(id: impl Into<String>, text_len: usize) -> Self {
        Self { id: id.into(), hard: SpanSet::empty(text_len), soft: Vec::new() }
    }

    pub fn text_len(&self) -> usize {
        self.hard.text_len()
    }

    pub fn to_json(&self) -> Value {
        json!({
            "id": self.id,
            "hard_labels": self.hard.pairs(),
            "soft_labels": soft_to_json(&self.soft),
            "text_len": self.text_len(),
        })
    }

    pub fn from_json(value: Value, line: usize) -> Result<Self, DataError> {
        let Value::Object(obj) = value else {
            return Err(DataError::Parse { line, msg: "expected a JSON object".into() });
        };
        let field = |name: &str| obj.get(name).ok_or_else(|| DataError::MissingField { line, name: name.into() });
        let id = field("id")?
            .as_str()
            .ok_or_else(|| DataError::Invalid { line, msg: "`id` must be a string".into() })?
            .to_string();
        let text_len = field("text_len")?
            .as_u64()
            .ok_or_else(|| DataError::Invalid { line, msg: "`text_len` must be a non-negative integer".into() })?
            as usize;
        let hard = parse_hard(field("hard_labels")?, text_len, line)?;
        let soft = parse_soft(field("soft_labels")?, text_len, line, true)?;
        Ok(Self { id, hard, soft })
    }
}

fn soft_to_json(soft: &[SoftSpan]) -> Value {
    Value::Array(
        soft.iter()
            .map(|s| json!({"start": s.span.start(), "end": s.span.end(), "prob": s.prob}))
            .collect(),
    )
}

fn as_offset(v: &Value, line: usize) -> Result<usize, DataError> {
    v.as_u64()
        .map(|x| x as usize)
        .ok_or_else(|| DataError::Invalid { line, msg: format!("offset {v} is not a non-negative integer") })
}

fn parse_hard(v: &Value, text_len: usize, line: usize) -> Result<SpanSet, DataError> {
    let items = v
        .as_array()
        .ok_or_else(|| DataError::Invalid { line, msg: "hard labels must be an array of [start, end] pairs".into() })?;
    let mut spans = Vec::with_capacity(items.len());
    for item in items {
        let pair = item.as_array().filter(|p| p.len() == 2).ok_or_else(|| DataError::Invalid {
            line,
            msg: format!("hard label {item} is not a [start, end] pair"),
        })?;
        let (s, e) = (as_offset(&pair[0], line)?, as_offset(&pair[1], line)?);
        spans.push(CharSpan::new(s, e).map_err(|source| DataError::Label { line, source })?);
    }
    SpanSet::normalize(spans, text_len).map_err(|source| DataError::Label { line, source })
}

fn parse_soft(v: &Value, text_len: usize, line: usize, require_disjoint: bool) -> Result<Vec<SoftSpan>, DataError> {
    let items = v
        .as_array()
        .ok_or_else(|| DataError::Invalid { line, msg: "soft labels must be an array".into() })?;
    let mut out = Vec::with_capacity(items.len());
    for item in items {
        let get = |k: &str| item.get(k).ok_or_else(|| DataError::MissingField { line, name: format!("soft_labels[].{k}") });
        let s = as_offset(get("start")?, line)?;
        let e = as_offset(get("end")?, line)?;
        let prob = get("prob")?
            .as_f64()
            .ok_or_else(|| DataError::Invalid { line, msg: "soft label prob must be a number".into() })?;
        let span = CharSpan::new(s, e).map_err(|source| DataError::Label { line, source })?;
        if e > text_len {
            return Err(DataError::Label { line, source: SpanError::OffsetOutOfBounds { start: s, end: e, text_len } });
        }
        out.push(SoftSpan::new(span, prob).map_err(|source| DataError::Label { line, source })?);
    }
    if require_disjoint {
        let mut sorted: Vec<_> = out.iter().map(|s| s.span).collect();
        sorted.sort();
        if sorted.windows(2).any(|w| w[0].end() > w[1].start()) {
            return Err(DataError::Invalid { line, msg: "soft labels overlap".into() });
        }
    }
    Ok(out)
}

fn read_lines<T>(path: &Path, mut parse: impl FnMut(Value, usize) -> Result<T, DataError>) -> Result<Vec<T>, DataError> {
    let io_err = |source| DataError::Io { path: path.display().to_string(), source };
    let reader = BufReader::new(File::open(path).map_err(io_err)?);
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(io_err)?;
        if line.trim().is_empty() {
            continue;
        }
        let value: Value = serde_json::from_str(&line).map_err(|e| DataError::Parse { line: line_no, msg: e.to_string() })?;
        out.push(parse(value, line_no)?);
    }
    Ok(out)
}

pub fn read_jsonl(path: impl AsRef<Path>, keys: &KeyMap) -> Result<Vec<Instance>, DataError> {
    read_lines(path.as_ref(), |v, line| Instance::from_json(v, keys, line))
}

pub fn write_jsonl(instances: &[Instance], path: impl AsRef<Path>, keys: &KeyMap) -> Result<(), DataError> {
    let body = render_lines(instances.iter().map(|i| i.to_json(keys)));
    write_file(path.as_ref(), body.as_bytes())
}

pub fn read_predictions(path: impl AsRef<Path>) -> Result<Vec<Prediction>, DataError> {
    read_lines(path.as_ref(), Prediction::from_json)
}

pub fn write_predictions(preds: &[Prediction], path: impl AsRef<Path>) -> Result<(), DataError> {
    write_file(path.as_ref(), render_predictions(preds).as_bytes())
}

/// The exact bytes [`write_predictions`] emits.
pub fn render_predictions(preds: &[Prediction]) -> String {
    render_lines(preds.iter().map(Prediction::to_json))
}

fn render_lines(values: impl Iterator<Item = Value>) -> String {
    let mut out = String::new();
    for v in values {
        out.push_str(&v.to_string());
        out.push('\n');
    }
    out
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), DataError> {
    write_atomic(path, bytes).map_err(|source| DataError::Io { path: path.display().to_string(), source })
}

/// Appends one JSON line to an open writer.
pub fn write_json_line(w: &mut impl Write, value: &Value) -> std::io::Result<()> {
    writeln!(w, "{value}")
}
