//! Turning detector verdicts into character spans of the original answer.

use serde::{Deserialize, Serialize};
use serde_json::Value;
use tracing::warn;

use crate::ask::{ask_json, Exchange};
use crate::backend::{ChatRequest, LlmBackend};
use crate::detectors::ExtractedSpan;
use crate::error::{Error, Result};
use crate::prompts::FACT_TO_SPAN;
use crate::span::{char_len, char_offset, CharSpan, SoftSpan, SpanSet};

#[derive(Debug, Clone, PartialEq)]
pub struct SubstringMapping {
    pub hard: SpanSet,
    /// One entry per matched text with nonzero probability, ordered by start.
    pub soft: Vec<SoftSpan>,
    pub warnings: Vec<String>,
}

/// Locates each extracted text as an exact substring of `answer`. The search
/// for each item starts where the previous match ended, so repeated texts
/// resolve to successive occurrences. Unmatched items are skipped.
pub fn map_substring(answer: &str, extracted: &[ExtractedSpan]) -> SubstringMapping {
    let len = char_len(answer);
    let mut cursor = 0;
    let mut spans = Vec::new();
    let mut soft = Vec::new();
    let mut warnings = Vec::new();
    for item in extracted {
        match locate(answer, &item.text, cursor) {
            Some((span, end_byte)) => {
                cursor = end_byte;
                spans.push(span);
                if item.prob > 0.0 {
                    soft.push(SoftSpan { span, prob: item.prob.min(1.0) });
                }
            }
            None => {
                warn!(text = %item.text, "extracted text not found in answer");
                warnings.push(format!("unmatched text {:?}", item.text));
            }
        }
    }
    let hard = SpanSet::normalize(spans, len).expect("matched spans lie inside the answer");
    SubstringMapping { hard, soft, warnings }
}

/// First occurrence of `needle` at or after byte `from`; returns the char
/// span and the byte offset just past the match.
fn locate(haystack: &str, needle: &str, from: usize) -> Option<(CharSpan, usize)> {
    if needle.is_empty() {
        return None;
    }
    let rel = haystack.get(from..)?.find(needle)?;
    let b0 = from + rel;
    let b1 = b0 + needle.len();
    let c0 = char_offset(haystack, b0);
    let span = CharSpan::new(c0, c0 + char_len(needle)).ok()?;
    Some((span, b1))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum Tokenization {
    /// Whitespace tokens, unless the mean token is longer than
    /// `max_mean_token_chars`, in which case every non-space character is a
    /// token (unsegmented scripts such as Chinese).
    Auto { max_mean_token_chars: usize },
    Whitespace,
    Chars,
}

impl Default for Tokenization {
    fn default() -> Self {
        Tokenization::Auto { max_mean_token_chars: 12 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Token<'a> {
    pub text: &'a str,
    pub span: CharSpan,
}

fn whitespace_tokens(text: &str) -> Vec<Token<'_>> {
    let mut out = Vec::new();
    let mut start: Option<(usize, usize)> = None;
    for (ci, (bi, ch)) in text.char_indices().enumerate() {
        match (ch.is_whitespace(), start) {
            (false, None) => start = Some((ci, bi)),
            (true, Some((c0, b0))) => {
                out.push(Token { text: &text[b0..bi], span: CharSpan::new(c0, ci).unwrap() });
                start = None;
            }
            _ => {}
        }
    }
    if let Some((c0, b0)) = start {
        out.push(Token { text: &text[b0..], span: CharSpan::new(c0, char_len(text)).unwrap() });
    }
    out
}

fn char_tokens(text: &str) -> Vec<Token<'_>> {
    text.char_indices()
        .enumerate()
        .filter(|(_, (_, ch))| !ch.is_whitespace())
        .map(|(ci, (bi, ch))| Token { text: &text[bi..bi + ch.len_utf8()], span: CharSpan::new(ci, ci + 1).unwrap() })
        .collect()
}

impl Tokenization {
    /// Picks the concrete mode for a text.
    pub fn resolve(self, text: &str) -> Tokenization {
        match self {
            Tokenization::Auto { max_mean_token_chars } => {
                let words = whitespace_tokens(text);
                let chars: usize = words.iter().map(|t| t.span.len()).sum();
                if !words.is_empty() && chars > max_mean_token_chars * words.len() {
                    Tokenization::Chars
                } else {
                    Tokenization::Whitespace
                }
            }
            other => other,
        }
    }

    pub fn tokenize(self, text: &str) -> Vec<Token<'_>> {
        match self.resolve(text) {
            Tokenization::Chars => char_tokens(text),
            _ => whitespace_tokens(text),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EditOp {
    Keep { orig: usize, corr: usize },
    Substitute { orig: usize, corr: usize },
    Delete { orig: usize },
    Insert { corr: usize },
}

/// Minimum-cost alignment from original tokens to corrected tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct WordAlignment {
    pub ops: Vec<EditOp>,
    /// Character span of each original token.
    pub token_spans: Vec<CharSpan>,
    pub cost: usize,
}

impl WordAlignment {
    /// Applies the ops to `original`, producing the corrected sequence.
    pub fn replay<'a>(&self, original: &[&'a str], corrected: &[&'a str]) -> Vec<&'a str> {
        self.ops
            .iter()
            .filter_map(|op| match *op {
                EditOp::Keep { orig, .. } => Some(original[orig]),
                EditOp::Substitute { corr, .. } | EditOp::Insert { corr } => Some(corrected[corr]),
                EditOp::Delete { .. } => None,
            })
            .collect()
    }

    /// Original token indices that were deleted or substituted.
    pub fn flagged(&self) -> Vec<usize> {
        self.ops
            .iter()
            .filter_map(|op| match *op {
                EditOp::Substitute { orig, .. } | EditOp::Delete { orig } => Some(orig),
                _ => None,
            })
            .collect()
    }
}

/// Unit-cost Levenshtein alignment over token sequences.
///
/// Among optimal alignments the backtrace prefers, at every cell, a
/// substitution, then a deletion, then an insertion, then a match. Walking
/// back from the end this places edits as far right as possible.
pub fn align<T: PartialEq>(original: &[T], corrected: &[T]) -> (Vec<EditOp>, usize) {
    let (n, m) = (original.len(), corrected.len());
    let w = m + 1;
    let mut d = vec![0usize; (n + 1) * w];
    for (j, cell) in d[..w].iter_mut().enumerate() {
        *cell = j;
    }
    for i in 1..=n {
        d[i * w] = i;
        for j in 1..=m {
            let diag = d[(i - 1) * w + j - 1] + usize::from(original[i - 1] != corrected[j - 1]);
            let up = d[(i - 1) * w + j] + 1;
            let left = d[i * w + j - 1] + 1;
            d[i * w + j] = diag.min(up).min(left);
        }
    }
    let mut ops = Vec::with_capacity(n.max(m));
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = d[i * w + j];
        if i > 0 && j > 0 {
            let same = original[i - 1] == corrected[j - 1];
            let diag = d[(i - 1) * w + j - 1];
            if !same && here == diag + 1 {
                ops.push(EditOp::Substitute { orig: i - 1, corr: j - 1 });
                i -= 1;
                j -= 1;
                continue;
            }
            if here == d[(i - 1) * w + j] + 1 {
                ops.push(EditOp::Delete { orig: i - 1 });
                i -= 1;
                continue;
            }
            if here == d[i * w + j - 1] + 1 {
                ops.push(EditOp::Insert { corr: j - 1 });
                j -= 1;
                continue;
            }
            debug_assert!(same && here == diag);
            ops.push(EditOp::Keep { orig: i - 1, corr: j - 1 });
            i -= 1;
            j -= 1;
        } else if i > 0 {
            ops.push(EditOp::Delete { orig: i - 1 });
            i -= 1;
        } else {
            ops.push(EditOp::Insert { corr: j - 1 });
            j -= 1;
        }
    }
    ops.reverse();
    (ops, d[n * w + m])
}

pub fn word_alignment(original: &str, corrected: &str, tok: Tokenization) -> WordAlignment {
    let mode = tok.resolve(original);
    let a = mode.tokenize(original);
    let b = mode.tokenize(corrected);
    let at: Vec<&str> = a.iter().map(|t| t.text).collect();
    let bt: Vec<&str> = b.iter().map(|t| t.text).collect();
    let (ops, cost) = align(&at, &bt);
    WordAlignment { ops, token_spans: a.iter().map(|t| t.span).collect(), cost }
}

pub fn map_edit_distance(original: &str, corrected: &str) -> SpanSet {
    map_edit_distance_with(original, corrected, Tokenization::default())
}

/// Labels every original token that the corrected answer deletes or
/// substitutes. Runs of consecutive flagged tokens become one span that
/// includes the whitespace between them; insertions label nothing.
pub fn map_edit_distance_with(original: &str, corrected: &str, tok: Tokenization) -> SpanSet {
    let al = word_alignment(original, corrected, tok);
    let mut flagged = al.flagged();
    flagged.sort_unstable();
    flagged.dedup();
    let mut spans = Vec::new();
    let mut run: Option<(usize, usize)> = None;
    for idx in flagged {
        run = match run {
            Some((first, last)) if idx == last + 1 => Some((first, idx)),
            Some((first, last)) => {
                spans.push(CharSpan::new(al.token_spans[first].start(), al.token_spans[last].end()).unwrap());
                Some((idx, idx))
            }
            None => Some((idx, idx)),
        };
    }
    if let Some((first, last)) = run {
        spans.push(CharSpan::new(al.token_spans[first].start(), al.token_spans[last].end()).unwrap());
    }
    SpanSet::normalize(spans, char_len(original)).expect("token spans lie inside the text")
}

#[derive(Debug, Clone, PartialEq)]
pub struct FactMapping {
    pub hard: SpanSet,
    pub warnings: Vec<String>,
    pub exchange: Exchange,
}

pub const MAPPINGS_SCHEMA: &str = r#"{"mappings": [{"fact": "[fact]", "excerpt": "[verbatim excerpt of the answer]"}]}"#;

pub fn fact_to_span_request(answer: &str, facts: &[String]) -> ChatRequest {
    let listed = facts.iter().map(|f| format!("- {f}")).collect::<Vec<_>>().join("\n");
    ChatRequest::new(FACT_TO_SPAN.render(&[("answer", answer), ("facts", &listed)]), "")
}

fn parse_mappings(v: &Value) -> std::result::Result<Vec<String>, String> {
    let arr = v.get("mappings").and_then(Value::as_array).ok_or("missing `mappings` array")?;
    arr.iter()
        .map(|m| {
            m.get("excerpt")
                .and_then(Value::as_str)
                .map(str::to_string)
                .ok_or_else(|| format!("mapping {m} has no string `excerpt`"))
        })
        .collect()
}

/// Asks the model for the verbatim excerpt behind each false fact and
/// locates the excerpts in the answer. Excerpts that are not substrings of
/// the answer are dropped with a warning.
pub fn map_facts_to_spans(answer: &str, false_facts: &[String], llm: &dyn LlmBackend) -> Result<FactMapping> {
    if false_facts.is_empty() {
        return Err(Error::Precondition("fact-to-span mapping needs at least one fact".into()));
    }
    let req = fact_to_span_request(answer, false_facts);
    let (excerpts, exchange) = ask_json(llm, "fact-to-span mapping", &req, MAPPINGS_SCHEMA, parse_mappings)?;
    let mut spans = Vec::new();
    let mut warnings = Vec::new();
    for ex in excerpts {
        match locate(answer, &ex, 0) {
            Some((span, _)) => spans.push(span),
            None => warnings.push(format!("unmatched text {ex:?}")),
        }
    }
    let hard = SpanSet::normalize(spans, char_len(answer))?;
    Ok(FactMapping { hard, warnings, exchange })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::MockLlm;
    use proptest::prelude::*;

    const ANSWER: &str = "The capital of France is Berlin.";

    fn ex(text: &str, prob: f64) -> ExtractedSpan {
        ExtractedSpan { text: text.into(), prob }
    }

    #[test]
    fn substring_worked_example() {
        let m = map_substring(ANSWER, &[ex("Berlin", 0.99)]);
        assert_eq!(m.hard.pairs(), vec![(25, 31)]);
        assert_eq!(m.soft, vec![SoftSpan { span: CharSpan::new(25, 31).unwrap(), prob: 0.99 }]);
        assert!(m.warnings.is_empty());
    }

    #[test]
    fn substring_unmatched() {
        let m = map_substring(ANSWER, &[ex("Madrid", 0.5)]);
        assert!(m.hard.is_empty());
        assert_eq!(m.warnings.len(), 1);
    }

    #[test]
    fn substring_repeats_resume_left_to_right() {
        let answer = "born in 1990, moved in 1990";
        let occurrences: Vec<usize> = answer.match_indices("1990").map(|(b, _)| char_offset(answer, b)).collect();
        let m = map_substring(answer, &[ex("1990", 0.8), ex("1990", 0.6)]);
        assert_eq!(m.hard.pairs(), occurrences.iter().map(|&s| (s, s + 4)).collect::<Vec<_>>());
        assert_eq!(m.soft[1].prob, 0.6);
        // out-of-order items are not found once the cursor has passed them
        let m = map_substring(answer, &[ex("moved", 0.5), ex("born", 0.5)]);
        assert_eq!(m.warnings.len(), 1);
    }

    #[test]
    fn substring_multibyte_offsets() {
        let answer = "北京是中国的首都，人口三千万。";
        let m = map_substring(answer, &[ex("三千万", 0.7)]);
        assert_eq!(m.hard.pairs(), vec![(11, 14)]);
        assert_eq!(m.hard.spans()[0].slice(answer), "三千万");
    }

    #[test]
    fn edit_distance_examples() {
        assert!(map_edit_distance(ANSWER, ANSWER).is_empty());
        let got = map_edit_distance(ANSWER, "The capital of France is Paris.");
        assert_eq!(got.pairs(), vec![(25, 32)]);
        assert_eq!(got.spans()[0].slice(ANSWER), "Berlin.");
        assert_eq!(map_edit_distance("a b c", "a c").pairs(), vec![(2, 3)]);
    }

    #[test]
    fn adjacent_flagged_words_merge_over_whitespace() {
        let got = map_edit_distance("He was born in Paris in 1950.", "He was born in Lyon on 1950.");
        assert_eq!(got.pairs(), vec![(15, 23)]);
        // insertions alone label nothing
        assert!(map_edit_distance("a b", "a x b").is_empty());
    }

    #[test]
    fn tie_break_prefers_rightmost_edit() {
        let (ops, cost) = align(&["a", "a"], &["a"]);
        assert_eq!(cost, 1);
        assert_eq!(ops, vec![EditOp::Keep { orig: 0, corr: 0 }, EditOp::Delete { orig: 1 }]);
        let (ops, _) = align(&["x"], &["y"]);
        assert_eq!(ops, vec![EditOp::Substitute { orig: 0, corr: 0 }]);
    }

    #[test]
    fn unsegmented_text_falls_back_to_chars() {
        let orig = "北京是中国的首都，人口三千万。";
        assert_eq!(Tokenization::default().resolve(orig), Tokenization::Chars);
        let got = map_edit_distance(orig, "北京是中国的首都，人口两千万。");
        assert_eq!(got.pairs(), vec![(11, 12)]);
        assert_eq!(Tokenization::default().resolve(ANSWER), Tokenization::Whitespace);
    }

    #[test]
    fn facts_to_spans() {
        let facts = vec!["capital is Berlin".to_string()];
        let llm = MockLlm::new().with(
            &fact_to_span_request(ANSWER, &facts),
            r#"{"mappings": [{"fact": "capital is Berlin", "excerpt": "Berlin"}]}"#,
        );
        let m = map_facts_to_spans(ANSWER, &facts, &llm).unwrap();
        assert_eq!(m.hard.pairs(), vec![(25, 31)]);

        let llm = MockLlm::new().with(
            &fact_to_span_request(ANSWER, &facts),
            r#"{"mappings": [{"fact": "capital is Berlin", "excerpt": "capital city is Berlin"}]}"#,
        );
        let m = map_facts_to_spans(ANSWER, &facts, &llm).unwrap();
        assert!(m.hard.is_empty());
        assert_eq!(m.warnings.len(), 1);

        assert!(matches!(map_facts_to_spans(ANSWER, &[], &llm), Err(Error::Precondition(_))));
    }

    fn levenshtein(a: &[u8], b: &[u8]) -> usize {
        // row-by-row recurrence, independent of `align`
        let mut prev: Vec<usize> = (0..=b.len()).collect();
        for (i, x) in a.iter().enumerate() {
            let mut cur = vec![i + 1];
            for (j, y) in b.iter().enumerate() {
                cur.push((prev[j] + usize::from(x != y)).min(prev[j + 1] + 1).min(cur[j] + 1));
            }
            prev = cur;
        }
        prev[b.len()]
    }

    proptest! {
        #[test]
        fn alignment_is_optimal_and_replays(a in prop::collection::vec(0u8..4, 0..20), b in prop::collection::vec(0u8..4, 0..20)) {
            let (ops, cost) = align(&a, &b);
            prop_assert_eq!(cost, levenshtein(&a, &b));
            let edits = ops.iter().filter(|op| !matches!(op, EditOp::Keep { .. })).count();
            prop_assert_eq!(edits, cost);
            let replayed: Vec<u8> = ops.iter().filter_map(|op| match *op {
                EditOp::Keep { orig, .. } => Some(a[orig]),
                EditOp::Substitute { corr, .. } | EditOp::Insert { corr } => Some(b[corr]),
                EditOp::Delete { .. } => None,
            }).collect();
            prop_assert_eq!(replayed, b);
        }

        #[test]
        fn substring_slices_round_trip(words in prop::collection::vec("[a-zé]{1,6}", 1..12), picks in prop::collection::vec(any::<prop::sample::Index>(), 0..4)) {
            let answer = words.join(" ");
            let mut idx: Vec<usize> = picks.iter().map(|p| p.index(words.len())).collect();
            idx.sort_unstable();
            idx.dedup();
            let items: Vec<ExtractedSpan> = idx.iter().map(|&i| ex(&words[i], 0.5)).collect();
            let m = map_substring(&answer, &items);
            for s in &m.soft {
                prop_assert!(s.span.end() <= char_len(&answer));
            }
            let sliced: Vec<&str> = m.soft.iter().map(|s| s.span.slice(&answer)).collect();
            let matched: Vec<&str> = items.iter().map(|i| i.text.as_str()).filter(|t| !m.warnings.iter().any(|w| w.contains(&format!("{t:?}")))).collect();
            prop_assert_eq!(sliced, matched);
        }
    }
}
