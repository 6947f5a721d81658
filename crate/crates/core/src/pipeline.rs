//! Retrieve → detect → map over a corpus, with per-instance failure capture
//! and a reproducibility manifest.

use std::collections::BTreeMap;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tracing::{debug, warn};

use crate::backend::{
    BackendError, Cache, CacheStats, CachedLlm, CachedSearch, HttpSearch, LlmBackend, LlmSearch, MockLlm, MockSearch,
    OpenAiChat, SearchBackend,
};
use crate::config::{ConfigError, LlmConfig, MapperKind, RunConfig, SearchConfig};
use crate::dataset::{Instance, KeyMap, Prediction};
use crate::detectors::{detect_direct_with, detect_kg, detect_min_revision, Detection, DetectorKind, Verdict};
use crate::error::{Error, Result};
use crate::io::sha256_hex;
use crate::mapping::{map_edit_distance_with, map_facts_to_spans, map_substring};
use crate::prompts;
use crate::retrieval::{ContextBundle, ContextMode, Retriever};
use crate::span::{SoftSpan, SpanSet};

/// The external services a run talks to.
#[derive(Clone)]
pub struct Backends {
    pub llm: Arc<dyn LlmBackend>,
    pub translator: Arc<dyn LlmBackend>,
    pub search: Option<Arc<dyn SearchBackend>>,
    pub cache: Option<Arc<Cache>>,
}

fn build_llm(cfg: &LlmConfig, cache: Option<&Arc<Cache>>) -> Result<Arc<dyn LlmBackend>, BackendError> {
    let raw: Arc<dyn LlmBackend> = match cfg {
        LlmConfig::Mock { fixture_dir } => Arc::new(MockLlm::from_dir(fixture_dir)),
        LlmConfig::Openai(c) => Arc::new(OpenAiChat::new(c.clone())?),
    };
    Ok(match cache {
        Some(c) => Arc::new(CachedLlm::new(raw, c.clone())),
        None => raw,
    })
}

impl Backends {
    pub fn from_config(cfg: &RunConfig) -> Result<Self, ConfigError> {
        let cache = cfg
            .cache_dir
            .as_ref()
            .map(|d| {
                Cache::open(d).map(Arc::new).map_err(|source| ConfigError::Io { path: d.display().to_string(), source })
            })
            .transpose()?;
        let invalid = |e: BackendError| ConfigError::Invalid(e.to_string());
        let llm = build_llm(&cfg.llm, cache.as_ref()).map_err(invalid)?;
        let translator = match &cfg.translation {
            Some(t) => build_llm(t, cache.as_ref()).map_err(invalid)?,
            None => llm.clone(),
        };
        let search = match &cfg.search {
            None => None,
            Some(s) => {
                let raw: Arc<dyn SearchBackend> = match s {
                    SearchConfig::Mock { fixture_dir } => Arc::new(MockSearch::from_dir(fixture_dir)),
                    SearchConfig::Http(h) => Arc::new(HttpSearch::new(h.clone()).map_err(invalid)?),
                    // the inner model is cached through the search cache below
                    SearchConfig::Llm { llm } => Arc::new(LlmSearch::new(build_llm(llm, None).map_err(invalid)?)),
                };
                Some(match &cache {
                    Some(c) => Arc::new(CachedSearch::new(raw, c.clone())) as Arc<dyn SearchBackend>,
                    None => raw,
                })
            }
        };
        Ok(Self { llm, translator, search, cache })
    }
}

/// A per-instance error, as written to the errors sidecar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub id: String,
    pub stage: String,
    pub error: String,
    pub raw_outputs: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Processed {
    pub prediction: Prediction,
    pub detection: Detection,
    pub context: Option<ContextBundle>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    /// One row per processed instance, in input order. Failed instances
    /// have empty labels.
    pub predictions: Vec<Prediction>,
    pub failures: Vec<Failure>,
    pub manifest: Value,
}

pub struct Pipeline {
    config: RunConfig,
    backends: Backends,
    instruction: Option<String>,
}

impl Pipeline {
    pub fn new(config: RunConfig, backends: Backends) -> Result<Self, ConfigError> {
        config.validate()?;
        if config.context_mode != ContextMode::None && backends.search.is_none() {
            return Err(ConfigError::Invalid("context retrieval needs a search backend".into()));
        }
        let instruction = config
            .detect_prompt
            .as_ref()
            .map(|p| {
                std::fs::read_to_string(p).map_err(|source| ConfigError::Io { path: p.display().to_string(), source })
            })
            .transpose()?;
        Ok(Self { config, backends, instruction })
    }

    pub fn from_config(config: RunConfig) -> Result<Self, ConfigError> {
        let backends = Backends::from_config(&config)?;
        Self::new(config, backends)
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn backends(&self) -> &Backends {
        &self.backends
    }

    /// Retrieves context for one instance. An empty search result degrades
    /// to no context, except for the kg detector which cannot run without.
    pub fn context_for(&self, inst: &Instance) -> Result<(Option<ContextBundle>, Vec<String>)> {
        let Some(search) = &self.backends.search else {
            return Ok((None, Vec::new()));
        };
        let retriever = Retriever {
            search: search.as_ref(),
            llm: self.backends.llm.as_ref(),
            translator: self.backends.translator.as_ref(),
            translate: self.config.translate,
            config: &self.config.retrieval,
        };
        match retriever.retrieve(inst, self.config.context_mode) {
            Ok(ctx) => Ok((ctx, Vec::new())),
            Err(Error::EmptyResult(q)) if self.config.detector != DetectorKind::Kg => {
                warn!(id = %inst.id, query = %q, "no passages found, detecting without context");
                Ok((None, vec![format!("no passages for {q:?}; detected without context")]))
            }
            Err(e) => Err(e),
        }
    }

    fn detect(&self, inst: &Instance, ctx: Option<&ContextBundle>) -> Result<Detection> {
        let llm = self.backends.llm.as_ref();
        match self.config.detector {
            DetectorKind::Direct => detect_direct_with(ctx, inst, llm, self.instruction.as_deref()),
            DetectorKind::Kg => {
                let ctx = ctx.ok_or_else(|| Error::Precondition("the kg detector needs retrieved context".into()))?;
                detect_kg(ctx, inst, llm)
            }
            DetectorKind::MinRevision => detect_min_revision(ctx, inst, llm),
        }
    }

    fn map(&self, inst: &Instance, det: &Detection, warnings: &mut Vec<String>) -> Result<Prediction> {
        let len = inst.answer_len();
        let hard_only = |hard: SpanSet| Prediction {
            id: inst.id.clone(),
            soft: hard.spans().iter().map(|&span| SoftSpan { span, prob: 1.0 }).collect(),
            hard,
        };
        let texts: Vec<String> = match &det.verdict {
            Verdict::ExtractedSpans(s) => s.iter().map(|e| e.text.clone()).collect(),
            Verdict::FalseFacts(f) => f.clone(),
            Verdict::CorrectedAnswer(_) => Vec::new(),
        };
        match (self.config.mapper(), &det.verdict) {
            (MapperKind::EditDistance, Verdict::CorrectedAnswer(c)) => {
                Ok(hard_only(map_edit_distance_with(&inst.answer, c, self.config.tokenization)))
            }
            (MapperKind::EditDistance, _) | (_, Verdict::CorrectedAnswer(_)) => {
                Err(Error::Precondition(format!("mapper {} cannot read this verdict", self.config.mapper())))
            }
            (MapperKind::Substring, verdict) => {
                let items = match verdict {
                    Verdict::ExtractedSpans(s) => s.clone(),
                    _ => texts.iter().map(|t| crate::detectors::ExtractedSpan { text: t.clone(), prob: 1.0 }).collect(),
                };
                let m = map_substring(&inst.answer, &items);
                warnings.extend(m.warnings);
                let hard = match self.config.hard_threshold {
                    None => m.hard,
                    Some(t) => SpanSet::normalize(m.soft.iter().filter(|s| s.prob > t).map(|s| s.span), len)?,
                };
                Ok(Prediction { id: inst.id.clone(), hard, soft: m.soft })
            }
            (MapperKind::FactToSpan, _) => {
                if texts.is_empty() {
                    return Ok(Prediction::empty(inst.id.clone(), len));
                }
                let m = map_facts_to_spans(&inst.answer, &texts, self.backends.llm.as_ref())?;
                warnings.extend(m.warnings);
                Ok(hard_only(m.hard))
            }
        }
    }

    /// Runs the three stages for one instance.
    pub fn process(&self, inst: &Instance) -> Result<Processed, Failure> {
        let fail = |stage: &str, e: Error| Failure {
            id: inst.id.clone(),
            stage: stage.to_string(),
            error: e.to_string(),
            raw_outputs: e.raw_outputs().to_vec(),
        };
        let (context, mut warnings) = self.context_for(inst).map_err(|e| fail("retrieval", e))?;
        let detection = self.detect(inst, context.as_ref()).map_err(|e| fail("detection", e))?;
        warnings.extend(detection.warnings.iter().cloned());
        let prediction = self.map(inst, &detection, &mut warnings).map_err(|e| {
            let mut f = fail("mapping", e);
            if f.raw_outputs.is_empty() {
                f.raw_outputs = detection.raw_outputs.clone();
            }
            f
        })?;
        debug!(id = %inst.id, spans = prediction.hard.spans().len(), "processed");
        Ok(Processed { prediction, detection, context, warnings })
    }

    fn selected<'a>(&self, instances: &'a [Instance]) -> Vec<&'a Instance> {
        instances
            .iter()
            .filter(|i| self.config.languages.is_empty() || self.config.languages.iter().any(|l| l.eq_ignore_ascii_case(&i.lang)))
            .collect()
    }

    /// Processes every selected instance on a pool of `parallelism` threads.
    /// Output order follows the input regardless of scheduling.
    pub fn run(&self, instances: &[Instance]) -> Result<RunOutput> {
        let chosen = self.selected(instances);
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.config.parallelism)
            .build()
            .map_err(|e| Error::Precondition(format!("cannot start worker pool: {e}")))?;
        let results: Vec<Result<Processed, Failure>> = pool.install(|| chosen.par_iter().map(|i| self.process(i)).collect());
        let mut predictions = Vec::with_capacity(results.len());
        let mut failures = Vec::new();
        for (inst, r) in chosen.iter().zip(results) {
            match r {
                Ok(p) => predictions.push(p.prediction),
                Err(f) => {
                    warn!(id = %f.id, stage = %f.stage, error = %f.error, "instance failed");
                    predictions.push(Prediction::empty(inst.id.clone(), inst.answer_len()));
                    failures.push(f);
                }
            }
        }
        let manifest = self.manifest(instances, chosen.len(), &failures);
        Ok(RunOutput { predictions, failures, manifest })
    }

    /// Everything that determines the output under mock backends. Paths,
    /// thread counts and timestamps are left out so that the manifest is
    /// identical across machines and parallelism settings.
    pub fn manifest(&self, instances: &[Instance], processed: usize, failures: &[Failure]) -> Value {
        let c = &self.config;
        let backend_ids: BTreeMap<&str, String> = [
            Some(("llm", self.backends.llm.identity().to_string())),
            Some(("translation", self.backends.translator.identity().to_string())),
            self.backends.search.as_ref().map(|s| ("search", s.identity().to_string())),
        ]
        .into_iter()
        .flatten()
        .collect();
        let cache = self.backends.cache.as_ref().map(|c| c.stats()).map(|s: CacheStats| json!(s));
        json!({
            "tool": { "name": "halluspan", "version": env!("CARGO_PKG_VERSION") },
            "input": {
                "digest": corpus_digest(instances, &c.keys),
                "n_instances": instances.len(),
                "n_processed": processed,
            },
            "config": {
                "languages": c.languages,
                "context_mode": c.context_mode,
                "translate": c.translate,
                "detector": c.detector,
                "mapper": c.mapper(),
                "hard_threshold": c.hard_threshold,
                "detect_prompt_sha256": self.instruction.as_ref().map(sha256_hex),
                "retrieval": c.retrieval,
                "tokenization": c.tokenization,
                "keys": c.keys,
                "seed": c.seed,
            },
            "prompt_versions": prompts::versions(),
            "backends": backend_ids,
            "cache": cache,
            "n_failures": failures.len(),
            "failed_ids": failures.iter().map(|f| f.id.as_str()).collect::<Vec<_>>(),
        })
    }
}

/// SHA-256 over the canonical JSONL rendering of a corpus.
pub fn corpus_digest(instances: &[Instance], keys: &KeyMap) -> String {
    let mut text = String::new();
    for i in instances {
        text.push_str(&i.to_json(keys).to_string());
        text.push('\n');
    }
    sha256_hex(text)
}

/// Pretty JSON with a trailing newline, as written to manifest files.
pub fn render_manifest(manifest: &Value) -> String {
    let mut s = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    s.push('\n');
    s
}
