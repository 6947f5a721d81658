//! Declarative run configuration, read from TOML.
//!
//! Secrets never appear in the file; backends name the environment variable
//! that holds them.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{HttpSearchConfig, OpenAiChatConfig};
use crate::dataset::KeyMap;
use crate::detectors::DetectorKind;
use crate::mapping::Tokenization;
use crate::metrics::Conventions;
use crate::optimizer::OptimizerConfig;
use crate::retrieval::{ContextMode, RetrievalConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {message}")]
    Parse { path: String, message: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapperKind {
    Substring,
    FactToSpan,
    EditDistance,
}

impl MapperKind {
    /// The mapper that consumes each detector's verdict by default.
    pub fn paired_with(detector: DetectorKind) -> Self {
        match detector {
            DetectorKind::Direct => MapperKind::Substring,
            DetectorKind::Kg => MapperKind::FactToSpan,
            DetectorKind::MinRevision => MapperKind::EditDistance,
        }
    }

    /// Whether this mapper can read the verdict `detector` produces. Span
    /// texts and false facts are interchangeable; a corrected answer is not.
    pub fn accepts(self, detector: DetectorKind) -> bool {
        match (self, detector) {
            (MapperKind::EditDistance, d) => d == DetectorKind::MinRevision,
            (_, d) => d != DetectorKind::MinRevision,
        }
    }
}

impl std::fmt::Display for MapperKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MapperKind::Substring => "substring",
            MapperKind::FactToSpan => "fact_to_span",
            MapperKind::EditDistance => "edit_distance",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LlmConfig {
    /// Canned replies from a fixture directory.
    Mock { fixture_dir: PathBuf },
    Openai(OpenAiChatConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SearchConfig {
    Mock { fixture_dir: PathBuf },
    Http(HttpSearchConfig),
    /// Uses a model's own knowledge as the single passage.
    Llm { llm: LlmConfig },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Languages to process; empty means all.
    #[serde(default)]
    pub languages: Vec<String>,
    #[serde(default = "default_context_mode")]
    pub context_mode: ContextMode,
    /// Translate non-English queries to English before searching.
    #[serde(default)]
    pub translate: bool,
    #[serde(default = "default_detector")]
    pub detector: DetectorKind,
    /// Overrides the detector's usual mapper.
    #[serde(default)]
    pub mapper: Option<MapperKind>,
    /// With the substring mapper, only extractions above this probability
    /// become hard labels. Unset keeps every matched extraction.
    #[serde(default)]
    pub hard_threshold: Option<f64>,
    /// Replaces the built-in system prompt of the direct detector.
    #[serde(default)]
    pub detect_prompt: Option<PathBuf>,
    /// Seeds demo sampling and the optimizer's search order.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
    #[serde(default)]
    pub cache_dir: Option<PathBuf>,
    #[serde(default)]
    pub retrieval: RetrievalConfig,
    #[serde(default)]
    pub keys: KeyMap,
    #[serde(default)]
    pub tokenization: Tokenization,
    #[serde(default)]
    pub conventions: Conventions,
    pub llm: LlmConfig,
    #[serde(default)]
    pub search: Option<SearchConfig>,
    /// Translation model; defaults to `llm`.
    #[serde(default)]
    pub translation: Option<LlmConfig>,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
}

fn default_context_mode() -> ContextMode {
    ContextMode::FromQuestion
}

fn default_detector() -> DetectorKind {
    DetectorKind::Direct
}

fn default_parallelism() -> usize {
    4
}

impl RunConfig {
    pub fn from_toml(text: &str, origin: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| ConfigError::Parse { path: origin.to_string(), message: e.to_string() })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads, validates and resolves relative paths against the file's
    /// directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        let mut cfg = Self::from_toml(&text, &path.display().to_string())?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        cfg.resolve_paths(&base);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        let fix_llm = |l: &mut LlmConfig| {
            if let LlmConfig::Mock { fixture_dir } = l {
                fix(fixture_dir);
            }
        };
        fix_llm(&mut self.llm);
        if let Some(t) = &mut self.translation {
            fix_llm(t);
        }
        match &mut self.search {
            Some(SearchConfig::Mock { fixture_dir }) => fix(fixture_dir),
            Some(SearchConfig::Llm { llm }) => fix_llm(llm),
            _ => {}
        }
        if let Some(p) = &mut self.cache_dir {
            fix(p);
        }
        if let Some(p) = &mut self.detect_prompt {
            fix(p);
        }
    }

    pub fn mapper(&self) -> MapperKind {
        self.mapper.unwrap_or_else(|| MapperKind::paired_with(self.detector))
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if !self.mapper().accepts(self.detector) {
            return bad(format!("mapper {} cannot read the output of the {} detector", self.mapper(), self.detector));
        }
        if self.context_mode != ContextMode::None && self.search.is_none() {
            return bad("a [search] backend is required unless context_mode = \"none\"".into());
        }
        if self.detector == DetectorKind::Kg && self.context_mode == ContextMode::None {
            return bad("the kg detector needs retrieved context".into());
        }
        if self.parallelism == 0 {
            return bad("parallelism must be at least 1".into());
        }
        if let Some(t) = self.hard_threshold {
            if !(0.0..=1.0).contains(&t) {
                return bad(format!("hard_threshold {t} is outside [0, 1]"));
            }
        }
        if self.detect_prompt.is_some() && self.detector != DetectorKind::Direct {
            return bad("detect_prompt only applies to the direct detector".into());
        }
        Ok(())
    }
}
