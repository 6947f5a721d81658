//! Character spans over answer text.
//!
//! Offsets count Unicode scalar values (Rust `char`s), never bytes. A
//! [`SpanSet`] is always kept in canonical form: sorted, disjoint and with no
//! two spans touching, so structural equality is coverage equality.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SpanError {
    #[error("span [{start}, {end}) exceeds text length {text_len}")]
    OffsetOutOfBounds { start: usize, end: usize, text_len: usize },
    #[error("span [{start}, {end}) is empty or inverted")]
    InvertedSpan { start: usize, end: usize },
    #[error("span sets cover texts of different lengths ({left} vs {right})")]
    LengthMismatch { left: usize, right: usize },
    #[error("probability {0} outside (0, 1]")]
    InvalidProbability(f64),
}

/// Half-open interval `[start, end)` of character offsets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "(usize, usize)", into = "(usize, usize)")]
pub struct CharSpan {
    start: usize,
    end: usize,
}

impl CharSpan {
    pub fn new(start: usize, end: usize) -> Result<Self, SpanError> {
        if start >= end {
            return Err(SpanError::InvertedSpan { start, end });
        }
        Ok(Self { start, end })
    }

    pub fn start(&self) -> usize {
        self.start
    }

    pub fn end(&self) -> usize {
        self.end
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, pos: usize) -> bool {
        self.start <= pos && pos < self.end
    }

    /// Slices the spanned characters out of `text`.
    pub fn slice<'a>(&self, text: &'a str) -> &'a str {
        let (b0, b1) = byte_range(text, self.start, self.end);
        &text[b0..b1]
    }
}

impl TryFrom<(usize, usize)> for CharSpan {
    type Error = SpanError;

    fn try_from((start, end): (usize, usize)) -> Result<Self, Self::Error> {
        CharSpan::new(start, end)
    }
}

impl From<CharSpan> for (usize, usize) {
    fn from(s: CharSpan) -> Self {
        (s.start, s.end)
    }
}

/// Canonical set of spans over a text of `text_len` characters.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize)]
pub struct SpanSet {
    spans: Vec<CharSpan>,
    text_len: usize,
}

impl SpanSet {
    pub fn empty(text_len: usize) -> Self {
        Self { spans: Vec::new(), text_len }
    }

    /// Builds the canonical set from arbitrary spans: sorts, then merges
    /// overlapping and touching spans.
    pub fn normalize(spans: impl IntoIterator<Item = CharSpan>, text_len: usize) -> Result<Self, SpanError> {
        let mut raw: Vec<CharSpan> = spans.into_iter().collect();
        for s in &raw {
            if s.end > text_len {
                return Err(SpanError::OffsetOutOfBounds { start: s.start, end: s.end, text_len });
            }
        }
        raw.sort_unstable();
        let mut merged: Vec<CharSpan> = Vec::with_capacity(raw.len());
        for s in raw {
            match merged.last_mut() {
                Some(last) if s.start <= last.end => last.end = last.end.max(s.end),
                _ => merged.push(s),
            }
        }
        Ok(Self { spans: merged, text_len })
    }

    /// Like [`SpanSet::normalize`] but takes raw `(start, end)` pairs.
    pub fn from_pairs(pairs: &[(usize, usize)], text_len: usize) -> Result<Self, SpanError> {
        let spans = pairs
            .iter()
            .map(|&(s, e)| CharSpan::new(s, e))
            .collect::<Result<Vec<_>, _>>()?;
        Self::normalize(spans, text_len)
    }

    pub fn from_char_mask(mask: &[bool]) -> Self {
        let mut spans = Vec::new();
        let mut run_start = None;
        for (i, &covered) in mask.iter().enumerate() {
            match (covered, run_start) {
                (true, None) => run_start = Some(i),
                (false, Some(s)) => {
                    spans.push(CharSpan { start: s, end: i });
                    run_start = None;
                }
                _ => {}
            }
        }
        if let Some(s) = run_start {
            spans.push(CharSpan { start: s, end: mask.len() });
        }
        Self { spans, text_len: mask.len() }
    }

    pub fn to_char_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.text_len];
        for s in &self.spans {
            mask[s.start..s.end].iter_mut().for_each(|m| *m = true);
        }
        mask
    }

    pub fn spans(&self) -> &[CharSpan] {
        &self.spans
    }

    pub fn text_len(&self) -> usize {
        self.text_len
    }

    pub fn is_empty(&self) -> bool {
        self.spans.is_empty()
    }

    /// Number of covered characters.
    pub fn covered(&self) -> usize {
        self.spans.iter().map(CharSpan::len).sum()
    }

    pub fn pairs(&self) -> Vec<(usize, usize)> {
        self.spans.iter().map(|s| (s.start, s.end)).collect()
    }

    fn check_len(&self, other: &SpanSet) -> Result<(), SpanError> {
        if self.text_len != other.text_len {
            return Err(SpanError::LengthMismatch { left: self.text_len, right: other.text_len });
        }
        Ok(())
    }

    /// `|A ∩ B|` in characters, by a linear sweep over both sorted lists.
    pub fn intersect_count(&self, other: &SpanSet) -> Result<usize, SpanError> {
        self.check_len(other)?;
        let (a, b) = (&self.spans, &other.spans);
        let (mut i, mut j, mut total) = (0, 0, 0);
        while i < a.len() && j < b.len() {
            let lo = a[i].start.max(b[j].start);
            let hi = a[i].end.min(b[j].end);
            if lo < hi {
                total += hi - lo;
            }
            if a[i].end <= b[j].end {
                i += 1;
            } else {
                j += 1;
            }
        }
        Ok(total)
    }

    /// `|A ∪ B|` in characters.
    pub fn union_count(&self, other: &SpanSet) -> Result<usize, SpanError> {
        let inter = self.intersect_count(other)?;
        Ok(self.covered() + other.covered() - inter)
    }
}

impl<'de> Deserialize<'de> for SpanSet {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Raw {
            spans: Vec<CharSpan>,
            text_len: usize,
        }
        let raw = Raw::deserialize(d)?;
        SpanSet::normalize(raw.spans, raw.text_len).map_err(serde::de::Error::custom)
    }
}

/// A span together with the fraction of labellers that marked it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SoftSpan {
    pub span: CharSpan,
    pub prob: f64,
}

impl SoftSpan {
    pub fn new(span: CharSpan, prob: f64) -> Result<Self, SpanError> {
        if !(prob > 0.0 && prob <= 1.0) {
            return Err(SpanError::InvalidProbability(prob));
        }
        Ok(Self { span, prob })
    }
}

/// Number of characters (Unicode scalar values) in `text`.
pub fn char_len(text: &str) -> usize {
    text.chars().count()
}

/// Converts a character range to a byte range in `text`. Offsets past the end
/// clamp to `text.len()`.
pub fn byte_range(text: &str, start: usize, end: usize) -> (usize, usize) {
    let mut b0 = text.len();
    let mut b1 = text.len();
    for (ci, (bi, _)) in text.char_indices().enumerate() {
        if ci == start {
            b0 = bi;
        }
        if ci == end {
            b1 = bi;
            break;
        }
    }
    (b0, b1)
}

/// Character offset of byte index `byte` (which must be a char boundary).
pub fn char_offset(text: &str, byte: usize) -> usize {
    text[..byte].chars().count()
}
