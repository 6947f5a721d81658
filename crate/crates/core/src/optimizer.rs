//! Budgeted search over detection prompts with two-fold cross-validation.
//!
//! Candidates are the cross product of instruction rewrites and few-shot demo
//! subsets. The pool is shuffled with a seeded RNG, the first `budget`
//! candidates are scored on both folds, and the best mean score is retained.
//! The run state is rewritten after every candidate so an interrupted search
//! resumes where it stopped.

use std::collections::HashMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use tracing::{info, warn};

use crate::ask::ask_json;
use crate::backend::{ChatRequest, LlmBackend};
use crate::dataset::{Instance, Prediction};
use crate::detectors::{detect_direct_with, Verdict};
use crate::error::{Error, Result};
use crate::io::{hash_fields, sha256_hex, write_atomic};
use crate::mapping::map_substring;
use crate::metrics::{iou_with, max_iou_with, spearman_with, Conventions, SoftLabelVector};
use crate::prompts::{INSTRUCTION_PROPOSAL, TEXT_EXTRACTION};
use crate::retrieval::ContextBundle;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Objective {
    #[serde(rename = "iou")]
    Iou,
    #[serde(rename = "corr")]
    Corr,
    #[serde(rename = "max_iou")]
    MaxIou,
    #[serde(rename = "iou+corr")]
    IouCorr,
}

impl Objective {
    pub const ALL: [Objective; 4] = [Objective::Iou, Objective::Corr, Objective::MaxIou, Objective::IouCorr];

    pub fn name(self) -> &'static str {
        match self {
            Objective::Iou => "iou",
            Objective::Corr => "corr",
            Objective::MaxIou => "max_iou",
            Objective::IouCorr => "iou+corr",
        }
    }
}

impl std::str::FromStr for Objective {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Objective::ALL
            .into_iter()
            .find(|o| o.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown objective {s:?}; expected one of iou, corr, max_iou, iou+corr"))
    }
}

/// Fold of an instance, from the parity of its id hash.
pub fn fold_of(id: &str) -> usize {
    let h = sha256_hex(id);
    usize::from(u8::from_str_radix(&h[h.len() - 2..], 16).expect("hex digest") & 1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Demo {
    pub id: String,
    pub question: String,
    pub answer: String,
    /// Short digest of the context the demo was labeled against.
    pub context_digest: String,
    pub gold_spans: Vec<String>,
}

impl Demo {
    pub fn from_instance(inst: &Instance, ctx: Option<&ContextBundle>) -> Self {
        let gold_spans = inst
            .gold_hard
            .as_ref()
            .map(|set| set.spans().iter().map(|s| s.slice(&inst.answer).to_string()).collect())
            .unwrap_or_default();
        Self {
            id: inst.id.clone(),
            question: inst.question.clone(),
            answer: inst.answer.clone(),
            context_digest: sha256_hex(ctx.map(ContextBundle::text).unwrap_or_default())[..12].to_string(),
            gold_spans,
        }
    }

    fn render(&self) -> String {
        let spans: Vec<Value> = self
            .gold_spans
            .iter()
            .map(|t| serde_json::json!({ "text": t, "probability": 1.0 }))
            .collect();
        format!(
            "Question: {}\nAnswer: {}\nOutput: {}",
            self.question,
            self.answer,
            serde_json::json!({ "incorrect_spans": spans })
        )
    }
}

/// Instruction followed by an examples section, or the bare instruction
/// when there are no demos.
pub fn render_system_prompt(instruction: &str, demos: &[Demo]) -> String {
    if demos.is_empty() {
        return instruction.to_string();
    }
    let shots: Vec<String> = demos.iter().map(Demo::render).collect();
    format!("{instruction}\n\n# Labeled Examples\n\n{}", shots.join("\n\n"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptCandidate {
    pub id: String,
    pub instruction: String,
    /// Index of the demo subset, `None` for zero-shot.
    pub demo_subset: Option<usize>,
    /// `demos[f]` is used while scoring fold `f` and is drawn from the other
    /// fold.
    pub demos: [Vec<Demo>; 2],
}

impl PromptCandidate {
    pub fn new(instruction: String, demo_subset: Option<usize>, demos: [Vec<Demo>; 2]) -> Self {
        let mut fields = vec![instruction.clone()];
        for fold in &demos {
            fields.push(fold.iter().map(|d| d.id.as_str()).collect::<Vec<_>>().join("\u{1f}"));
        }
        let id = hash_fields(fields.iter().map(String::as_str))[..16].to_string();
        Self { id, instruction, demo_subset, demos }
    }

    pub fn system_prompt(&self, fold: usize) -> String {
        render_system_prompt(&self.instruction, &self.demos[fold])
    }

    /// Prompt for use outside cross-validation, with the demos of both folds.
    pub fn deployment_prompt(&self) -> String {
        let all: Vec<Demo> = self.demos.iter().flatten().cloned().collect();
        render_system_prompt(&self.instruction, &all)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub objective: Objective,
    /// Maximum number of candidate evaluations.
    pub budget: usize,
    /// Taken from the run-level seed rather than the `[optimizer]` table.
    #[serde(skip)]
    pub seed: u64,
    /// Instruction rewrites requested from the model.
    pub rewrites: usize,
    /// Demo subsets sampled per fold; 0 means zero-shot only.
    pub demo_subsets: usize,
    pub demos_per_subset: usize,
    /// Adds the seed instruction itself to the candidate pool.
    pub include_seed: bool,
    pub conventions: Conventions,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            objective: Objective::IouCorr,
            budget: 8,
            seed: 0,
            rewrites: 4,
            demo_subsets: 2,
            demos_per_subset: 2,
            include_seed: true,
            conventions: Conventions::default(),
        }
    }
}

pub const INSTRUCTIONS_SCHEMA: &str = r#"{"instructions": ["[rewrite 1]", "[rewrite 2]"]}"#;

fn parse_instructions(v: &Value) -> std::result::Result<Vec<String>, String> {
    let arr = match v {
        Value::Array(a) => a,
        other => other.get("instructions").and_then(Value::as_array).ok_or("missing `instructions` array")?,
    };
    arr.iter()
        .map(|i| i.as_str().map(|s| s.trim().to_string()).ok_or_else(|| format!("instruction {i} is not a string")))
        .collect()
}

pub fn proposal_request(seed_instruction: &str, count: usize) -> ChatRequest {
    ChatRequest::new(
        INSTRUCTION_PROPOSAL.render(&[("count", &count.to_string()), ("instruction", seed_instruction)]),
        "",
    )
}

/// Asks for `k` rewrites of the seed instruction. Duplicates and empty
/// rewrites are dropped, keeping first occurrences.
pub fn propose_instructions(seed_instruction: &str, llm: &dyn LlmBackend, k: usize) -> Result<Vec<String>> {
    if k == 0 {
        return Err(Error::Precondition("at least one rewrite must be requested".into()));
    }
    let (mut rewrites, _) =
        ask_json(llm, "instruction proposal", &proposal_request(seed_instruction, k), INSTRUCTIONS_SCHEMA, parse_instructions)?;
    rewrites.retain(|r| !r.is_empty());
    let mut seen = std::collections::HashSet::new();
    rewrites.retain(|r| seen.insert(r.clone()));
    rewrites.truncate(k);
    Ok(rewrites)
}

/// Samples `count` subsets per fold. Subset `j` for fold `f` draws from the
/// instances outside fold `f`.
pub fn sample_demo_subsets(
    instances: &[Instance],
    contexts: &HashMap<String, ContextBundle>,
    count: usize,
    per_subset: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<[Vec<Demo>; 2]> {
    let pool = |fold: usize| -> Vec<&Instance> {
        instances.iter().filter(|i| fold_of(&i.id) != fold && i.gold_hard.is_some()).collect()
    };
    let pools = [pool(0), pool(1)];
    (0..count)
        .map(|_| {
            let pick = |p: &Vec<&Instance>, rng: &mut ChaCha8Rng| -> Vec<Demo> {
                let mut chosen: Vec<&Instance> = p.choose_multiple(rng, per_subset.min(p.len())).copied().collect();
                chosen.sort_by(|a, b| a.id.cmp(&b.id));
                chosen.iter().map(|i| Demo::from_instance(i, contexts.get(&i.id))).collect()
            };
            let f0 = pick(&pools[0], rng);
            let f1 = pick(&pools[1], rng);
            [f0, f1]
        })
        .collect()
}

/// Cross product of instructions and demo subsets, deduplicated by id.
pub fn build_candidates(instructions: &[String], subsets: &[[Vec<Demo>; 2]]) -> Vec<PromptCandidate> {
    let mut out: Vec<PromptCandidate> = Vec::new();
    for instruction in instructions {
        if subsets.is_empty() {
            out.push(PromptCandidate::new(instruction.clone(), None, [Vec::new(), Vec::new()]));
        }
        for (j, demos) in subsets.iter().enumerate() {
            out.push(PromptCandidate::new(instruction.clone(), Some(j), demos.clone()));
        }
    }
    let mut seen = std::collections::HashSet::new();
    out.retain(|c| seen.insert(c.id.clone()));
    out
}

/// Rewrites from the model crossed with sampled demo subsets.
pub fn propose_candidates(
    seed_instruction: &str,
    llm: &dyn LlmBackend,
    instances: &[Instance],
    contexts: &HashMap<String, ContextBundle>,
    cfg: &OptimizerConfig,
) -> Result<Vec<PromptCandidate>> {
    let mut instructions = Vec::new();
    if cfg.include_seed {
        instructions.push(seed_instruction.to_string());
    }
    instructions.extend(propose_instructions(seed_instruction, llm, cfg.rewrites)?);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let subsets = sample_demo_subsets(instances, contexts, cfg.demo_subsets, cfg.demos_per_subset, &mut rng);
    Ok(build_candidates(&instructions, &subsets))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub candidate_id: String,
    pub fold_scores: [f64; 2],
    pub mean: f64,
    pub demo_ids: [Vec<String>; 2],
    /// Instances whose detection failed and were scored as empty.
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizationRun {
    pub objective: Objective,
    pub budget: usize,
    pub seed: u64,
    pub folds: usize,
    /// Candidates in evaluation order.
    pub pool: Vec<PromptCandidate>,
    pub trace: Vec<TraceEntry>,
    pub best: Option<PromptCandidate>,
    pub best_mean: Option<f64>,
}

impl OptimizationRun {
    fn persist(&self, path: Option<&Path>) -> Result<()> {
        if let Some(p) = path {
            let mut bytes = serde_json::to_vec_pretty(self).expect("run state serializes");
            bytes.push(b'\n');
            write_atomic(p, &bytes).map_err(|source| Error::Io { path: p.display().to_string(), source })?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|source| Error::Io { path: path.display().to_string(), source })?;
        serde_json::from_slice(&bytes)
            .map_err(|e| Error::Precondition(format!("{} is not a valid optimizer trace: {e}", path.display())))
    }
}

/// Demo ids that appear in the fold they were evaluated on.
pub fn leakage_violations(run: &OptimizationRun) -> Vec<String> {
    let mut out = Vec::new();
    for entry in &run.trace {
        for (fold, ids) in entry.demo_ids.iter().enumerate() {
            for id in ids {
                if fold_of(id) == fold {
                    out.push(format!("candidate {}: demo {id} is in evaluation fold {fold}", entry.candidate_id));
                }
            }
        }
    }
    out
}

struct FoldScore {
    value: f64,
    failures: usize,
}

fn predict(
    inst: &Instance,
    ctx: Option<&ContextBundle>,
    llm: &dyn LlmBackend,
    system: &str,
) -> std::result::Result<Prediction, Error> {
    let det = detect_direct_with(ctx, inst, llm, Some(system))?;
    let Verdict::ExtractedSpans(spans) = det.verdict else {
        unreachable!("direct detection yields extracted spans")
    };
    let m = map_substring(&inst.answer, &spans);
    Ok(Prediction { id: inst.id.clone(), hard: m.hard, soft: m.soft })
}

fn score_fold(
    fold: &[&Instance],
    contexts: &HashMap<String, ContextBundle>,
    llm: &dyn LlmBackend,
    system: &str,
    objective: Objective,
    conv: &Conventions,
) -> Result<FoldScore> {
    let rows = fold
        .par_iter()
        .map(|inst| -> Result<(f64, f64, f64, bool)> {
            let (pred, failed) = match predict(inst, contexts.get(&inst.id), llm, system) {
                Ok(p) => (p, false),
                Err(e) => {
                    warn!(id = %inst.id, error = %e, "detection failed during optimization, scoring as empty");
                    (Prediction::empty(inst.id.clone(), inst.answer_len()), true)
                }
            };
            let gold_hard = inst.gold_hard.as_ref().expect("checked before scoring");
            let gold_soft = inst.gold_soft.clone().unwrap_or_else(|| {
                gold_hard.spans().iter().map(|&span| crate::span::SoftSpan { span, prob: 1.0 }).collect()
            });
            let iou = iou_with(&pred.hard, gold_hard, conv)?;
            let corr = spearman_with(
                &SoftLabelVector::from_soft_spans(&pred.soft, pred.text_len())?,
                &SoftLabelVector::from_soft_spans(&gold_soft, inst.answer_len())?,
                conv,
            )?;
            let max_iou = match &inst.annotator_sets {
                Some(sets) if !sets.is_empty() => max_iou_with(&pred.hard, sets, conv)?,
                _ => max_iou_with(&pred.hard, std::slice::from_ref(gold_hard), conv)?,
            };
            Ok((iou, corr, max_iou, failed))
        })
        .collect::<Result<Vec<_>>>()?;
    let n = rows.len() as f64;
    let mean = |f: fn(&(f64, f64, f64, bool)) -> f64| rows.iter().map(f).sum::<f64>() / n;
    let value = match objective {
        Objective::Iou => mean(|r| r.0),
        Objective::Corr => mean(|r| r.1),
        Objective::MaxIou => mean(|r| r.2),
        Objective::IouCorr => (mean(|r| r.0) + mean(|r| r.1)) / 2.0,
    };
    Ok(FoldScore { value, failures: rows.iter().filter(|r| r.3).count() })
}

/// Runs the search. With `trace_path` set, the state is written after each
/// candidate, and an existing compatible state file is resumed instead of
/// starting over.
pub fn optimize(
    instances: &[Instance],
    contexts: &HashMap<String, ContextBundle>,
    llm: &dyn LlmBackend,
    seed_instruction: Option<&str>,
    cfg: &OptimizerConfig,
    trace_path: Option<&Path>,
) -> Result<OptimizationRun> {
    if cfg.budget == 0 {
        return Err(Error::Precondition("optimizer budget must be at least 1".into()));
    }
    if let Some(i) = instances.iter().find(|i| i.gold_hard.is_none()) {
        return Err(Error::Precondition(format!("instance {} has no gold labels", i.id)));
    }
    let folds: [Vec<&Instance>; 2] = [0, 1].map(|f| instances.iter().filter(|i| fold_of(&i.id) == f).collect());
    if folds.iter().any(Vec::is_empty) {
        return Err(Error::Precondition("both cross-validation folds need at least one instance".into()));
    }

    let resumed = match trace_path {
        Some(p) if p.exists() => {
            let run = OptimizationRun::load(p)?;
            if run.objective != cfg.objective || run.seed != cfg.seed || run.budget != cfg.budget {
                return Err(Error::Precondition(format!(
                    "{} was written with different objective, seed or budget",
                    p.display()
                )));
            }
            info!(done = run.trace.len(), "resuming optimizer run");
            Some(run)
        }
        _ => None,
    };
    let mut run = match resumed {
        Some(run) => run,
        None => {
            let default_seed = TEXT_EXTRACTION.render(&[]);
            let seed_instruction = seed_instruction.unwrap_or(&default_seed);
            let mut pool = propose_candidates(seed_instruction, llm, instances, contexts, cfg)?;
            pool.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed));
            pool.truncate(cfg.budget);
            let run = OptimizationRun {
                objective: cfg.objective,
                budget: cfg.budget,
                seed: cfg.seed,
                folds: 2,
                pool,
                trace: Vec::new(),
                best: None,
                best_mean: None,
            };
            run.persist(trace_path)?;
            run
        }
    };

    while run.trace.len() < run.pool.len() {
        let cand = run.pool[run.trace.len()].clone();
        let mut fold_scores = [0.0; 2];
        let mut failures = 0;
        for (f, fold) in folds.iter().enumerate() {
            let s = score_fold(fold, contexts, llm, &cand.system_prompt(f), cfg.objective, &cfg.conventions)?;
            fold_scores[f] = s.value;
            failures += s.failures;
        }
        let mean = (fold_scores[0] + fold_scores[1]) / 2.0;
        info!(candidate = %cand.id, mean, "scored candidate");
        if run.best_mean.is_none_or(|b| mean > b) {
            run.best_mean = Some(mean);
            run.best = Some(cand.clone());
        }
        run.trace.push(TraceEntry {
            candidate_id: cand.id.clone(),
            fold_scores,
            mean,
            demo_ids: cand.demos.clone().map(|d| d.into_iter().map(|x| x.id).collect()),
            failures,
        });
        run.persist(trace_path)?;
    }
    Ok(run)
}
