//! Character-level IoU, soft-label Spearman correlation and MaxIoU.
//!
//! Degenerate cases (empty span sets, constant probability vectors) have no
//! standard definition; the values used here live in [`Conventions`] and are
//! written into every [`MetricReport`].

use std::collections::HashMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Instance, Prediction};
use crate::span::{SoftSpan, SpanError, SpanSet};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricError {
    #[error(transparent)]
    Span(#[from] SpanError),
    #[error("vectors have different lengths ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("cannot correlate empty vectors")]
    EmptyText,
    #[error("max_iou needs at least one annotation")]
    NoAnnotations,
    #[error("instance ids differ between predictions and gold: {}", .0.join(", "))]
    MissingInstance(Vec<String>),
    #[error("instance {0} has no gold {1} labels")]
    MissingGold(String, &'static str),
}

/// Values used where the metrics are mathematically undefined.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Conventions {
    /// IoU when prediction and gold are both empty.
    pub both_empty_iou: f64,
    /// IoU when exactly one side is empty (the ratio is 0 anyway).
    pub one_empty_iou: f64,
    pub both_constant_corr: f64,
    pub one_constant_corr: f64,
    pub tie_method: TieMethod,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TieMethod {
    Average,
}

impl Default for Conventions {
    fn default() -> Self {
        Self {
            both_empty_iou: 1.0,
            one_empty_iou: 0.0,
            both_constant_corr: 1.0,
            one_constant_corr: 0.0,
            tie_method: TieMethod::Average,
        }
    }
}

/// Per-character probability that the character is hallucinated.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftLabelVector(pub Vec<f64>);

impl SoftLabelVector {
    /// Writes each span's probability into the positions it covers; where
    /// spans overlap the larger probability wins.
    pub fn from_soft_spans(spans: &[SoftSpan], text_len: usize) -> Result<Self, SpanError> {
        let mut probs = vec![0.0f64; text_len];
        for s in spans {
            if s.span.end() > text_len {
                return Err(SpanError::OffsetOutOfBounds { start: s.span.start(), end: s.span.end(), text_len });
            }
            for p in &mut probs[s.span.start()..s.span.end()] {
                *p = p.max(s.prob);
            }
        }
        Ok(Self(probs))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

pub fn iou(pred: &SpanSet, gold: &SpanSet) -> Result<f64, MetricError> {
    iou_with(pred, gold, &Conventions::default())
}

pub fn iou_with(pred: &SpanSet, gold: &SpanSet, conv: &Conventions) -> Result<f64, MetricError> {
    let inter = pred.intersect_count(gold)?;
    let union = pred.union_count(gold)?;
    Ok(match (pred.is_empty(), gold.is_empty()) {
        (true, true) => conv.both_empty_iou,
        (true, false) | (false, true) => conv.one_empty_iou,
        _ => inter as f64 / union as f64,
    })
}

pub fn max_iou(pred: &SpanSet, annotations: &[SpanSet]) -> Result<f64, MetricError> {
    max_iou_with(pred, annotations, &Conventions::default())
}

pub fn max_iou_with(pred: &SpanSet, annotations: &[SpanSet], conv: &Conventions) -> Result<f64, MetricError> {
    if annotations.is_empty() {
        return Err(MetricError::NoAnnotations);
    }
    annotations
        .iter()
        .map(|a| iou_with(pred, a, conv))
        .try_fold(f64::NEG_INFINITY, |best, x| x.map(|v| best.max(v)))
}

/// Ranks starting at 1, ties receiving the mean of the ranks they span.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    sxy / (sxx * syy).sqrt()
}

fn is_constant(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[0] == w[1])
}

pub fn spearman(pred: &SoftLabelVector, gold: &SoftLabelVector) -> Result<f64, MetricError> {
    spearman_with(pred, gold, &Conventions::default())
}

pub fn spearman_with(pred: &SoftLabelVector, gold: &SoftLabelVector, conv: &Conventions) -> Result<f64, MetricError> {
    if pred.len() != gold.len() {
        return Err(MetricError::LengthMismatch(pred.len(), gold.len()));
    }
    if pred.is_empty() {
        return Err(MetricError::EmptyText);
    }
    match (is_constant(&pred.0), is_constant(&gold.0)) {
        (true, true) => return Ok(conv.both_constant_corr),
        (true, false) | (false, true) => return Ok(conv.one_constant_corr),
        _ => {}
    }
    let r = pearson(&average_ranks(&pred.0), &average_ranks(&gold.0));
    Ok(r.clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceScore {
    pub id: String,
    pub iou: f64,
    pub corr: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_iou: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_instance: Vec<InstanceScore>,
    pub mean_iou: f64,
    pub mean_corr: f64,
    /// Mean over instances that carry per-annotator labels.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_max_iou: Option<f64>,
    pub conventions: Conventions,
}

impl MetricReport {
    pub fn from_scores(per_instance: Vec<InstanceScore>, conventions: Conventions) -> Self {
        let mean = |xs: &mut dyn Iterator<Item = f64>| {
            let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
            (n > 0).then(|| sum / n as f64)
        };
        let mean_iou = mean(&mut per_instance.iter().map(|s| s.iou)).unwrap_or(0.0);
        let mean_corr = mean(&mut per_instance.iter().map(|s| s.corr)).unwrap_or(0.0);
        let mean_max_iou = mean(&mut per_instance.iter().filter_map(|s| s.max_iou));
        Self { per_instance, mean_iou, mean_corr, mean_max_iou, conventions }
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "mean_iou": self.mean_iou,
            "mean_corr": self.mean_corr,
            "mean_max_iou": self.mean_max_iou,
            "n_instances": self.per_instance.len(),
            "per_instance": self.per_instance,
            "metadata": { "conventions": self.conventions },
        })
    }

    /// Aligned text table: one row per instance followed by the means.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let width = self.per_instance.iter().map(|s| s.id.len()).max().unwrap_or(2).max(4);
        let _ = writeln!(out, "{:width$}  {:>7}  {:>7}  {:>7}", "id", "IoU", "Corr", "MaxIoU");
        let fmt_opt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"));
        for s in &self.per_instance {
            let _ = writeln!(out, "{:width$}  {:>7.4}  {:>7.4}  {:>7}", s.id, s.iou, s.corr, fmt_opt(s.max_iou));
        }
        let _ = writeln!(
            out,
            "{:width$}  {:>7.4}  {:>7.4}  {:>7}",
            "MEAN",
            self.mean_iou,
            self.mean_corr,
            fmt_opt(self.mean_max_iou)
        );
        out
    }
}

pub fn score_instance(pred: &Prediction, gold: &Instance, conv: &Conventions) -> Result<InstanceScore, MetricError> {
    let len = gold.answer_len();
    let gold_hard = gold.gold_hard.as_ref().ok_or_else(|| MetricError::MissingGold(gold.id.clone(), "hard"))?;
    let gold_soft = gold.gold_soft.as_ref().ok_or_else(|| MetricError::MissingGold(gold.id.clone(), "soft"))?;
    let iou = iou_with(&pred.hard, gold_hard, conv)?;
    let corr = spearman_with(
        &SoftLabelVector::from_soft_spans(&pred.soft, pred.text_len())?,
        &SoftLabelVector::from_soft_spans(gold_soft, len)?,
        conv,
    )?;
    let max_iou = match &gold.annotator_sets {
        Some(sets) if !sets.is_empty() => Some(max_iou_with(&pred.hard, sets, conv)?),
        _ => None,
    };
    Ok(InstanceScore { id: gold.id.clone(), iou, corr, max_iou })
}

/// Scores every prediction against its gold record. Output rows follow the
/// gold order regardless of thread scheduling.
pub fn evaluate_corpus(preds: &[Prediction], golds: &[Instance], conv: &Conventions) -> Result<MetricReport, MetricError> {
    let by_id: HashMap<&str, &Prediction> = preds.iter().map(|p| (p.id.as_str(), p)).collect();
    let gold_ids: std::collections::HashSet<&str> = golds.iter().map(|g| g.id.as_str()).collect();
    let mut offenders: Vec<String> = golds
        .iter()
        .filter(|g| !by_id.contains_key(g.id.as_str()))
        .map(|g| format!("{} (no prediction)", g.id))
        .collect();
    offenders.extend(
        preds
            .iter()
            .filter(|p| !gold_ids.contains(p.id.as_str()))
            .map(|p| format!("{} (no gold)", p.id)),
    );
    if !offenders.is_empty() || by_id.len() != preds.len() {
        if offenders.is_empty() {
            offenders.push("duplicate prediction ids".into());
        }
        return Err(MetricError::MissingInstance(offenders));
    }
    let scores = golds
        .par_iter()
        .map(|g| score_instance(by_id[g.id.as_str()], g, conv))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(MetricReport::from_scores(scores, *conv))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::span::CharSpan;

    fn set(pairs: &[(usize, usize)], len: usize) -> SpanSet {
        SpanSet::from_pairs(pairs, len).unwrap()
    }

    fn v(x: &[f64]) -> SoftLabelVector {
        SoftLabelVector(x.to_vec())
    }

    #[test]
    fn iou_examples() {
        let a = set(&[(0, 4)], 10);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        assert_eq!(iou(&SpanSet::empty(10), &SpanSet::empty(10)).unwrap(), 1.0);
        assert_eq!(iou(&SpanSet::empty(10), &a).unwrap(), 0.0);
        assert_eq!(iou(&a, &set(&[(2, 6)], 10)).unwrap(), 2.0 / 6.0);
        let flipped = Conventions { both_empty_iou: 0.0, ..Conventions::default() };
        assert_eq!(iou_with(&SpanSet::empty(3), &SpanSet::empty(3), &flipped).unwrap(), 0.0);
        assert!(iou(&a, &SpanSet::empty(9)).is_err());
    }

    #[test]
    fn spearman_examples() {
        assert_eq!(spearman(&v(&[0., 0., 1., 1.]), &v(&[0., 0., 1., 1.])).unwrap(), 1.0);
        assert_eq!(spearman(&v(&[0., 1.]), &v(&[1., 0.])).unwrap(), -1.0);
        // scipy.stats.spearmanr([0,.5,1,0],[0,1,1,0]) = 0.9428090415820634
        let r = spearman(&v(&[0., 0.5, 1., 0.]), &v(&[0., 1., 1., 0.])).unwrap();
        assert!((r - 0.942_809_041_582_063_4).abs() < 1e-12);
    }

    #[test]
    fn spearman_degenerate() {
        assert_eq!(spearman(&v(&[0., 0.]), &v(&[0.3, 0.3])).unwrap(), 1.0);
        assert_eq!(spearman(&v(&[0., 0.]), &v(&[0., 1.])).unwrap(), 0.0);
        assert_eq!(spearman(&v(&[]), &v(&[])), Err(MetricError::EmptyText));
        assert_eq!(spearman(&v(&[1.]), &v(&[1., 2.])), Err(MetricError::LengthMismatch(1, 2)));
    }

    #[test]
    fn average_rank_ties() {
        assert_eq!(average_ranks(&[0., 0.5, 1., 0.]), vec![1.5, 3., 4., 1.5]);
    }

    #[test]
    fn max_iou_examples() {
        let pred = set(&[(0, 4)], 10);
        assert_eq!(max_iou(&pred, &[set(&[(2, 6)], 10), set(&[(0, 4)], 10)]).unwrap(), 1.0);
        assert_eq!(max_iou(&pred, std::slice::from_ref(&pred)).unwrap(), 1.0);
        assert_eq!(max_iou(&set(&[(0, 2)], 10), &[set(&[(5, 7)], 10)]).unwrap(), 0.0);
        assert_eq!(max_iou(&pred, &[]), Err(MetricError::NoAnnotations));
    }

    #[test]
    fn soft_vector_takes_max_on_overlap() {
        let s = |a, b, p| SoftSpan::new(CharSpan::new(a, b).unwrap(), p).unwrap();
        let got = SoftLabelVector::from_soft_spans(&[s(0, 2, 0.4), s(1, 3, 0.8)], 4).unwrap();
        assert_eq!(got.0, vec![0.4, 0.8, 0.8, 0.0]);
    }

    fn gold(id: &str, answer: &str, hard: &[(usize, usize)]) -> Instance {
        let mut inst = Instance::new(id, "en", "q", answer);
        let len = inst.answer_len();
        let hs = set(hard, len);
        inst.gold_soft = Some(hs.spans().iter().map(|&s| SoftSpan::new(s, 1.0).unwrap()).collect());
        inst.gold_hard = Some(hs);
        inst
    }

    fn pred_from(g: &Instance) -> Prediction {
        Prediction { id: g.id.clone(), hard: g.gold_hard.clone().unwrap(), soft: g.gold_soft.clone().unwrap() }
    }

    #[test]
    fn corpus_means() {
        let g1 = gold("a", "abcdef", &[(1, 3)]);
        let g2 = gold("b", "abcdef", &[(0, 2)]);
        let p1 = pred_from(&g1);
        let report = evaluate_corpus(std::slice::from_ref(&p1), std::slice::from_ref(&g1), &Conventions::default()).unwrap();
        assert_eq!((report.mean_iou, report.mean_corr), (1.0, 1.0));
        assert_eq!(report.mean_max_iou, None);

        let p2 = Prediction { id: "b".into(), hard: set(&[(4, 6)], 6), soft: vec![] };
        let report = evaluate_corpus(&[p2, p1], &[g1, g2], &Conventions::default()).unwrap();
        assert_eq!(report.per_instance[0].id, "a");
        assert_eq!(report.mean_iou, 0.5);
        let json = report.to_json();
        assert_eq!(json["metadata"]["conventions"]["both_empty_iou"], 1.0);
        assert!(report.to_table().contains("MEAN"));
    }

    #[test]
    fn corpus_id_mismatch_lists_offenders() {
        let g = gold("a", "abc", &[]);
        let p = Prediction::empty("z", 3);
        match evaluate_corpus(&[p], &[g], &Conventions::default()) {
            Err(MetricError::MissingInstance(ids)) => {
                assert!(ids.iter().any(|s| s.starts_with("a ")));
                assert!(ids.iter().any(|s| s.starts_with("z ")));
            }
            other => panic!("unexpected {other:?}"),
        }
    }
}
