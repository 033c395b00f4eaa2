use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::classification::EnsembleRule;
use crate::corpus::{ColumnMapping, SectionHeader, Task};
use crate::embedding::{EmbedOptions, EmbeddingProvider, HashEmbedder, HttpEmbedder, PrecomputedEmbedder};
use crate::llm::{CompletionProvider, GenerationConfig, HttpChatProvider, MockProvider, RetryPolicy};
use crate::selection::{SelectionMethod, DEFAULT_LAMBDA};

use super::PipelineError;

/// How summaries are produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SummaryStrategy {
    /// Retrieved in-context examples (top-k similarity or MMR).
    PromptSelection,
    /// Instruction-only full-note prompt.
    ZeroShot,
    /// Static five-example prompt of the header's major section.
    SectionFewshot,
    /// Third-person rewrite, then sectioned summary.
    PerspectiveShift,
    /// Salient-point extraction, then paragraph.
    TwoStage,
    /// Experimental: one section few-shot prompt per major section, outputs
    /// concatenated under section titles.
    SectionAssembly,
}

impl std::str::FromStr for SummaryStrategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| format!("unknown strategy `{s}`"))
    }
}

/// Which examples are summarized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalSplit {
    /// `eval_path` if given, otherwise the held-out part of the split.
    #[default]
    Validation,
    /// The retrieval corpus itself.
    Train,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EmbeddingKind {
    #[default]
    Hash,
    Precomputed,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbeddingSettings {
    pub provider: EmbeddingKind,
    /// Hash embedder dimension.
    pub dimension: usize,
    pub seed: u64,
    /// Vector file for the precomputed provider.
    pub vectors_path: Option<PathBuf>,
    /// Free-form tag recorded for precomputed vectors (e.g. the model name).
    pub tag: Option<String>,
    pub endpoint: Option<String>,
    pub model: Option<String>,
    pub api_key_env: String,
    pub timeout_secs: u64,
    pub options: EmbedOptions,
}

impl Default for EmbeddingSettings {
    fn default() -> Self {
        Self {
            provider: EmbeddingKind::Hash,
            dimension: 512,
            seed: 0,
            vectors_path: None,
            tag: None,
            endpoint: None,
            model: None,
            api_key_env: "OPENAI_API_KEY".into(),
            timeout_secs: 60,
            options: EmbedOptions::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MockMode {
    /// Canned text derived from the prompt hash.
    Canned,
    /// Echo the first in-context example's summary.
    Echo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LlmSettings {
    pub endpoint: String,
    /// Environment variable holding the API key. Keys are never read from
    /// config files or flags.
    pub api_key_env: String,
    pub timeout_secs: u64,
    pub retry: RetryPolicy,
    /// Use an offline mock instead of the HTTP endpoint.
    pub mock: Option<MockMode>,
}

impl Default for LlmSettings {
    fn default() -> Self {
        Self {
            endpoint: "https://api.openai.com/v1/chat/completions".into(),
            api_key_env: "OPENAI_API_KEY".into(),
            timeout_secs: 120,
            retry: RetryPolicy::default(),
            mock: None,
        }
    }
}

/// Every parameter of a run. Loaded from a config file, then overridden by
/// command-line flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub task: Task,
    pub strategy: SummaryStrategy,
    pub method: SelectionMethod,
    /// Defaults to 7 for task A and 1 for task B.
    pub k: Option<usize>,
    pub lambda: f64,
    pub generation: GenerationConfig,
    pub train_path: PathBuf,
    pub eval_path: Option<PathBuf>,
    pub train_fraction: f64,
    pub seed: u64,
    /// Defaults to the MTS-Dialog (A) or ACI-Bench (B) layout.
    pub columns: Option<ColumnMapping>,
    pub eval_columns: Option<ColumnMapping>,
    pub evaluate_on: EvalSplit,
    /// Drop a query from its own candidate pool when it is a corpus member.
    pub self_exclude: bool,
    /// Summarize only the first `limit` evaluation examples.
    pub limit: Option<usize>,
    /// Permit k > 1 for task B despite the context-length risk.
    pub allow_long_context: bool,
    pub max_in_flight: usize,
    pub override_labels: Vec<SectionHeader>,
    pub templates_dir: Option<PathBuf>,
    pub embedding: EmbeddingSettings,
    pub llm: LlmSettings,
    #[serde(skip_serializing)]
    pub cache_dir: Option<PathBuf>,
    #[serde(skip_serializing)]
    pub out_dir: PathBuf,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            task: Task::A,
            strategy: SummaryStrategy::PromptSelection,
            method: SelectionMethod::TopKSimilarity,
            k: None,
            lambda: DEFAULT_LAMBDA,
            generation: GenerationConfig::default(),
            train_path: PathBuf::from("train.csv"),
            eval_path: None,
            train_fraction: 0.8,
            seed: 0,
            columns: None,
            eval_columns: None,
            evaluate_on: EvalSplit::Validation,
            self_exclude: true,
            limit: None,
            allow_long_context: false,
            max_in_flight: 4,
            override_labels: EnsembleRule::default().override_labels.into_iter().collect(),
            templates_dir: None,
            embedding: EmbeddingSettings::default(),
            llm: LlmSettings::default(),
            cache_dir: None,
            out_dir: PathBuf::from("runs"),
        }
    }
}

impl PipelineConfig {
    pub fn default_k(task: Task) -> usize {
        match task {
            Task::A => 7,
            Task::B => 1,
        }
    }

    pub fn effective_k(&self) -> usize {
        self.k.unwrap_or_else(|| Self::default_k(self.task))
    }

    pub fn columns(&self) -> ColumnMapping {
        self.columns.clone().unwrap_or_else(|| ColumnMapping::default_for(self.task))
    }

    pub fn eval_columns(&self) -> ColumnMapping {
        self.eval_columns.clone().unwrap_or_else(|| self.columns())
    }

    pub fn ensemble_rule(&self) -> EnsembleRule {
        EnsembleRule::new(self.override_labels.iter().copied())
    }

    /// Fill defaults and reject inconsistent settings.
    pub fn resolved(&self) -> Result<PipelineConfig, PipelineError> {
        let mut cfg = self.clone();
        let k = cfg.effective_k();
        cfg.k = Some(k);
        if k == 0 {
            return Err(PipelineError::Config("k must be positive".into()));
        }
        if cfg.task == Task::B
            && matches!(cfg.strategy, SummaryStrategy::PromptSelection)
            && k > 1
            && !cfg.allow_long_context
        {
            return Err(PipelineError::ContextLength { k });
        }
        if !(0.0..=1.0).contains(&cfg.lambda) {
            return Err(PipelineError::Config(format!("lambda must lie in [0, 1], got {}", cfg.lambda)));
        }
        if cfg.max_in_flight == 0 {
            return Err(PipelineError::Config("max_in_flight must be at least 1".into()));
        }
        match (cfg.strategy, cfg.task) {
            (SummaryStrategy::SectionFewshot, Task::B) => {
                return Err(PipelineError::Config("section-fewshot needs task A section headers".into()))
            }
            (SummaryStrategy::ZeroShot, Task::A) => {
                return Err(PipelineError::Config("zero-shot prompts full notes (task B)".into()))
            }
            (SummaryStrategy::SectionAssembly, Task::A) => {
                return Err(PipelineError::Config("section-assembly builds full notes (task B)".into()))
            }
            _ => {}
        }
        cfg.generation.validate()?;
        Ok(cfg)
    }

    /// SHA-256 of the canonical JSON of the resolved config.
    pub fn digest(&self) -> String {
        crate::digest::sha256_hex(serde_json::to_vec(self).expect("config serializes"))
    }
}

fn env_key(var: &str) -> Option<String> {
    std::env::var(var).ok().filter(|v| !v.trim().is_empty())
}

/// Construct the embedding provider described by `settings`.
pub fn build_embedder(settings: &EmbeddingSettings) -> Result<Arc<dyn EmbeddingProvider>, PipelineError> {
    Ok(match settings.provider {
        EmbeddingKind::Hash => Arc::new(HashEmbedder { dimension: settings.dimension, seed: settings.seed }),
        EmbeddingKind::Precomputed => {
            let path = settings
                .vectors_path
                .as_ref()
                .ok_or_else(|| PipelineError::Config("precomputed embeddings need `vectors_path`".into()))?;
            let tag = settings.tag.clone().unwrap_or_else(|| format!("precomputed:{}", path.display()));
            Arc::new(PrecomputedEmbedder::from_file(path, tag)?)
        }
        EmbeddingKind::Http => {
            let endpoint = settings
                .endpoint
                .clone()
                .ok_or_else(|| PipelineError::Config("http embeddings need `endpoint`".into()))?;
            let model = settings
                .model
                .clone()
                .ok_or_else(|| PipelineError::Config("http embeddings need `model`".into()))?;
            Arc::new(HttpEmbedder::new(
                endpoint,
                model,
                env_key(&settings.api_key_env),
                Duration::from_secs(settings.timeout_secs),
            ))
        }
    })
}

/// Construct the completion provider described by `settings`.
pub fn build_completion_provider(settings: &LlmSettings) -> Arc<dyn CompletionProvider> {
    match settings.mock {
        Some(MockMode::Canned) => Arc::new(MockProvider::canned()),
        Some(MockMode::Echo) => Arc::new(MockProvider::echo_first_example()),
        None => Arc::new(HttpChatProvider::new(
            settings.endpoint.clone(),
            env_key(&settings.api_key_env),
            Duration::from_secs(settings.timeout_secs),
        )),
    }
}
