//! Treats several systems as annotators: per-character agreement becomes the
//! soft label and a strict majority becomes the hard label.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rayon::prelude::*;
use serde_json::{json, Value};
use thiserror::Error;

use crate::dataset::{Instance, Prediction};
use crate::metrics::{evaluate_corpus, Conventions, MetricError, MetricReport};
use crate::span::{CharSpan, SoftSpan, SpanSet};

#[derive(Debug, Error, PartialEq)]
pub enum CombineError {
    #[error("combination needs at least two systems, got {0}")]
    FewerThanTwoSystems(usize),
    #[error("instance mismatch: {0}")]
    InstanceMismatch(String),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

/// Hard labels of one system, keyed by instance id.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemOutput {
    pub tag: String,
    pub spans: BTreeMap<String, SpanSet>,
}

impl SystemOutput {
    /// Keeps only the hard labels; soft outputs of members are ignored.
    pub fn from_predictions(tag: impl Into<String>, preds: &[Prediction]) -> Result<Self, CombineError> {
        let tag = tag.into();
        let mut spans = BTreeMap::new();
        for p in preds {
            if spans.insert(p.id.clone(), p.hard.clone()).is_some() {
                return Err(CombineError::InstanceMismatch(format!("system {tag} has duplicate id {}", p.id)));
            }
        }
        Ok(Self { tag, spans })
    }
}

/// Agreement-proportion combination of span sets over one text.
pub fn combine_sets(id: &str, sets: &[&SpanSet]) -> Result<Prediction, CombineError> {
    let n = sets.len();
    if n < 2 {
        return Err(CombineError::FewerThanTwoSystems(n));
    }
    let len = sets[0].text_len();
    if let Some(bad) = sets.iter().find(|s| s.text_len() != len) {
        return Err(CombineError::InstanceMismatch(format!(
            "{id}: text lengths differ ({len} vs {})",
            bad.text_len()
        )));
    }
    let mut votes = vec![0usize; len];
    for set in sets {
        for span in set.spans() {
            for v in &mut votes[span.start()..span.end()] {
                *v += 1;
            }
        }
    }
    let mut soft = Vec::new();
    let mut i = 0;
    while i < len {
        let k = votes[i];
        let mut j = i + 1;
        while j < len && votes[j] == k {
            j += 1;
        }
        if k > 0 {
            let span = CharSpan::new(i, j).expect("run bounds are ordered");
            soft.push(SoftSpan { span, prob: k as f64 / n as f64 });
        }
        i = j;
    }
    let hard = SpanSet::from_char_mask(&votes.iter().map(|&k| 2 * k > n).collect::<Vec<_>>());
    Ok(Prediction { id: id.to_string(), hard, soft })
}

fn check_ids(outputs: &[SystemOutput]) -> Result<(), CombineError> {
    if outputs.len() < 2 {
        return Err(CombineError::FewerThanTwoSystems(outputs.len()));
    }
    let reference: BTreeSet<&String> = outputs[0].spans.keys().collect();
    for out in &outputs[1..] {
        let ids: BTreeSet<&String> = out.spans.keys().collect();
        if ids != reference {
            let diff: Vec<&str> = reference.symmetric_difference(&ids).map(|s| s.as_str()).collect();
            return Err(CombineError::InstanceMismatch(format!(
                "systems {} and {} disagree on ids: {}",
                outputs[0].tag,
                out.tag,
                diff.join(", ")
            )));
        }
    }
    Ok(())
}

/// Combines all systems for a single instance.
pub fn combine(outputs: &[SystemOutput], inst: &Instance) -> Result<Prediction, CombineError> {
    if outputs.len() < 2 {
        return Err(CombineError::FewerThanTwoSystems(outputs.len()));
    }
    let sets = outputs
        .iter()
        .map(|o| {
            let set = o
                .spans
                .get(&inst.id)
                .ok_or_else(|| CombineError::InstanceMismatch(format!("system {} has no id {}", o.tag, inst.id)))?;
            if set.text_len() != inst.answer_len() {
                return Err(CombineError::InstanceMismatch(format!(
                    "system {} labels {} over {} chars, answer has {}",
                    o.tag,
                    inst.id,
                    set.text_len(),
                    inst.answer_len()
                )));
            }
            Ok(set)
        })
        .collect::<Result<Vec<_>, _>>()?;
    combine_sets(&inst.id, &sets)
}

/// Combines every instance the systems share, in id order.
pub fn combine_all(outputs: &[SystemOutput]) -> Result<Vec<Prediction>, CombineError> {
    check_ids(outputs)?;
    let ids: Vec<&String> = outputs[0].spans.keys().collect();
    ids.par_iter()
        .map(|id| {
            let sets: Vec<&SpanSet> = outputs.iter().map(|o| &o.spans[*id]).collect();
            combine_sets(id, &sets)
        })
        .collect()
}

/// Per-system and combined scores against the same gold corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct CombinationReport {
    pub members: Vec<(String, MetricReport)>,
    pub combined: MetricReport,
}

impl CombinationReport {
    pub fn to_json(&self) -> Value {
        let members: Vec<Value> = self
            .members
            .iter()
            .map(|(tag, r)| json!({ "system": tag, "report": r.to_json() }))
            .collect();
        json!({ "members": members, "combined": self.combined.to_json() })
    }

    pub fn to_table(&self) -> String {
        let width = self.members.iter().map(|(t, _)| t.len()).max().unwrap_or(0).max("combined".len());
        let mut out = String::new();
        let _ = writeln!(out, "{:width$}  {:>7}  {:>7}", "system", "IoU", "Corr");
        for (tag, r) in &self.members {
            let _ = writeln!(out, "{tag:width$}  {:>7.4}  {:>7.4}", r.mean_iou, r.mean_corr);
        }
        let _ = writeln!(out, "{:width$}  {:>7.4}  {:>7.4}", "combined", self.combined.mean_iou, self.combined.mean_corr);
        out
    }
}

/// Member predictions are scored with their hard spans doubling as soft
/// labels at probability 1.
pub fn combination_report(
    outputs: &[SystemOutput],
    golds: &[Instance],
    conv: &Conventions,
) -> Result<CombinationReport, CombineError> {
    let combined = combine_all(outputs)?;
    let members = outputs
        .iter()
        .map(|o| {
            let preds: Vec<Prediction> = o
                .spans
                .iter()
                .map(|(id, set)| Prediction {
                    id: id.clone(),
                    hard: set.clone(),
                    soft: set.spans().iter().map(|&span| SoftSpan { span, prob: 1.0 }).collect(),
                })
                .collect();
            Ok((o.tag.clone(), evaluate_corpus(&preds, golds, conv)?))
        })
        .collect::<Result<Vec<_>, CombineError>>()?;
    let combined = evaluate_corpus(&combined, golds, conv)?;
    Ok(CombinationReport { members, combined })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn set(pairs: &[(usize, usize)], len: usize) -> SpanSet {
        SpanSet::from_pairs(pairs, len).unwrap()
    }

    fn system(tag: &str, id: &str, s: SpanSet) -> SystemOutput {
        SystemOutput { tag: tag.into(), spans: BTreeMap::from([(id.to_string(), s)]) }
    }

    #[test]
    fn three_of_five() {
        let len = 10;
        let sets = [
            set(&[(2, 5)], len),
            set(&[(2, 5)], len),
            set(&[(2, 5)], len),
            set(&[(4, 8)], len),
            set(&[], len),
        ];
        let refs: Vec<&SpanSet> = sets.iter().collect();
        let p = combine_sets("x", &refs).unwrap();
        let probs: Vec<((usize, usize), f64)> = p.soft.iter().map(|s| ((s.span.start(), s.span.end()), s.prob)).collect();
        assert_eq!(probs, vec![((2, 4), 0.6), ((4, 5), 0.8), ((5, 8), 0.2)]);
        assert_eq!(p.hard.pairs(), vec![(2, 5)]);
    }

    #[test]
    fn unanimity_and_even_split() {
        let a = set(&[(1, 3)], 5);
        let p = combine_sets("x", &[&a, &a, &a]).unwrap();
        assert_eq!(p.hard, a);
        assert_eq!(p.soft.len(), 1);
        assert_eq!(p.soft[0].prob, 1.0);

        let e = SpanSet::empty(5);
        let p = combine_sets("x", &[&a, &e]).unwrap();
        assert!(p.hard.is_empty());
        assert_eq!(p.soft[0].prob, 0.5);
    }

    #[test]
    fn errors() {
        let a = set(&[(1, 3)], 5);
        assert_eq!(combine_sets("x", &[&a]).unwrap_err(), CombineError::FewerThanTwoSystems(1));
        let b = set(&[], 6);
        assert!(matches!(combine_sets("x", &[&a, &b]), Err(CombineError::InstanceMismatch(_))));
        let outs = [system("s1", "a", a.clone()), system("s2", "b", a.clone())];
        assert!(matches!(combine_all(&outs), Err(CombineError::InstanceMismatch(_))));
        let inst = Instance::new("a", "en", "q", "abcde");
        assert!(matches!(combine(&outs, &inst), Err(CombineError::InstanceMismatch(_))));
    }

    fn gold(id: &str, answer: &str, hard: SpanSet) -> Instance {
        let mut g = Instance::new(id, "en", "q", answer);
        g.gold_soft = Some(hard.spans().iter().map(|&span| SoftSpan { span, prob: 1.0 }).collect());
        g.gold_hard = Some(hard);
        g
    }

    #[test]
    fn report_lists_members_and_combined() {
        let answer = "x".repeat(100);
        let g = gold("i", &answer, set(&[(0, 100)], 100));
        let ends = [54, 53, 59, 60, 54];
        let outs: Vec<SystemOutput> = ends
            .iter()
            .enumerate()
            .map(|(k, &e)| system(&format!("sys{k}"), "i", set(&[(0, e)], 100)))
            .collect();
        let r = combination_report(&outs, &[g], &Conventions::default()).unwrap();
        let ious: Vec<f64> = r.members.iter().map(|(_, m)| m.mean_iou).collect();
        for (got, want) in ious.iter().zip([0.54, 0.53, 0.59, 0.60, 0.54]) {
            assert!((got - want).abs() < 1e-12);
        }
        // majority covers chars with at least 3 of 5 votes: [0, 54)
        assert!((r.combined.mean_iou - 0.54).abs() < 1e-12);
        let table = r.to_table();
        assert_eq!(table.lines().count(), 7);
        assert!(table.contains("combined"));
        assert_eq!(r.to_json()["members"].as_array().unwrap().len(), 5);
    }

    #[test]
    fn duplicated_perfect_system_is_idempotent() {
        let g = gold("i", "The capital of France is Berlin.", set(&[(25, 31)], 32));
        let s = system("p", "i", set(&[(25, 31)], 32));
        let r = combination_report(&[s.clone(), s.clone(), s], &[g], &Conventions::default()).unwrap();
        assert_eq!(r.combined, r.members[0].1);
        assert_eq!(r.combined.mean_iou, 1.0);
    }

    #[test]
    fn crafted_three_system_oracle() {
        // votes over 8 chars: [0,1,2,3,2,1,0,0]
        let len = 8;
        let outs = [
            system("a", "i", set(&[(1, 4)], len)),
            system("b", "i", set(&[(2, 5)], len)),
            system("c", "i", set(&[(3, 6)], len)),
        ];
        let g = gold("i", "abcdefgh", set(&[(2, 4)], len));
        let r = combination_report(&outs, &[g], &Conventions::default()).unwrap();
        // hard = {2,3,4}; gold = {2,3}; IoU 2/3
        assert!((r.combined.mean_iou - 2.0 / 3.0).abs() < 1e-12);
        // soft vector [0,1/3,2/3,1,2/3,1/3,0,0] vs gold [0,0,1,1,0,0,0,0]:
        // ranks [2,4.5,6.5,8,6.5,4.5,2,2] and [3.5,3.5,7.5,7.5,3.5,3.5,3.5,3.5]
        let x = [2.0, 4.5, 6.5, 8.0, 6.5, 4.5, 2.0, 2.0];
        let y = [3.5, 3.5, 7.5, 7.5, 3.5, 3.5, 3.5, 3.5];
        let mx = x.iter().sum::<f64>() / 8.0;
        let my = y.iter().sum::<f64>() / 8.0;
        let cov: f64 = x.iter().zip(&y).map(|(a, b)| (a - mx) * (b - my)).sum();
        let vx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
        let vy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
        assert!((r.combined.mean_corr - cov / (vx * vy).sqrt()).abs() < 1e-9);
    }

    fn arb_sets(n: usize) -> impl Strategy<Value = (usize, Vec<SpanSet>)> {
        (1usize..40).prop_flat_map(move |len| {
            let one = prop::collection::vec(any::<bool>(), len).prop_map(|m| SpanSet::from_char_mask(&m));
            (Just(len), prop::collection::vec(one, n))
        })
    }

    proptest! {
        #[test]
        fn probabilities_are_fractions_and_hard_is_majority((len, sets) in arb_sets(4), extra in 0usize..3) {
            let mut sets = sets;
            sets.truncate(2 + extra);
            let n = sets.len();
            let refs: Vec<&SpanSet> = sets.iter().collect();
            let p = combine_sets("x", &refs).unwrap();
            let mut prob = vec![0.0; len];
            for s in &p.soft {
                let k = (s.prob * n as f64).round();
                prop_assert!(k >= 1.0 && k <= n as f64);
                prop_assert_eq!(s.prob, k / n as f64);
                prob[s.span.start()..s.span.end()].fill(s.prob);
            }
            let mask: Vec<bool> = prob.iter().map(|&q| q > 0.5).collect();
            prop_assert_eq!(p.hard, SpanSet::from_char_mask(&mask));
        }

        #[test]
        fn permutation_invariant_and_monotone((len, sets) in arb_sets(5), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let refs: Vec<&SpanSet> = sets.iter().collect();
            let base = combine_sets("x", &refs).unwrap();
            let mut shuffled = refs.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            prop_assert_eq!(&combine_sets("x", &shuffled).unwrap(), &base);

            let empty = SpanSet::empty(len);
            let mut more = refs.clone();
            more.push(&empty);
            let grown = combine_sets("x", &more).unwrap();
            let before = crate::metrics::SoftLabelVector::from_soft_spans(&base.soft, len).unwrap();
            let after = crate::metrics::SoftLabelVector::from_soft_spans(&grown.soft, len).unwrap();
            for (a, b) in after.0.iter().zip(&before.0) {
                prop_assert!(a <= b);
            }
        }
    }
}
