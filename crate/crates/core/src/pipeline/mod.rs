//! End-to-end runs: load, embed, select, prompt, complete, evaluate, and
//! persist a replayable manifest.

mod config;
mod experiments;
mod run;

use std::path::PathBuf;

use thiserror::Error;

use crate::classification::ClassificationError;
use crate::corpus::CorpusError;
use crate::embedding::EmbeddingError;
use crate::llm::LlmError;
use crate::metrics::MetricError;
use crate::prompting::PromptError;
use crate::selection::SelectionError;

pub use config::{
    build_completion_provider, build_embedder, EmbeddingKind, EmbeddingSettings, EvalSplit, LlmSettings, MockMode,
    PipelineConfig, SummaryStrategy,
};
pub use experiments::{
    cmd_ablate_k, cmd_classify, cmd_stability, AblationReport, AblationRow, ClassifyOptions, ClassifyReport,
    LlmLabelSource, Spread, StabilityReport, StabilityRow,
};
pub use run::{
    cmd_run, create_output_dir, input_digest, load_run_data, read_generations, read_manifest, replay_config, run_pipeline, write_run, CompletionTiming,
    InputDigest, ManifestExample, PipelineDeps, PromptRecord, RunData, RunManifest, RunOutput, RunTiming,
    MANIFEST_VERSION,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(
        "k = {k} full-note examples risk exceeding the model context; set allow_long_context to proceed"
    )]
    ContextLength { k: usize },
    #[error("ablation over k needs at least one value")]
    EmptyKList,
    #[error("{0} is only defined for task A")]
    TaskAOnly(&'static str),
    #[error("stability needs at least 2 runs, got {0}")]
    TooFewRuns(usize),
    #[error("evaluation set has no reference summaries")]
    NoReferences,
    #[error("ensemble needs fine-tuned predictions (pass a predictions file)")]
    MissingPredictions,
    #[error("no LLM labels: provide a label file or enable the completion provider")]
    MissingLlmLabels,
    #[error("selection for `{id}` failed: {source}")]
    Selection { id: String, source: SelectionError },
    #[error("prompt for `{id}` failed: {source}")]
    Prompt { id: String, source: PromptError },
    #[error("cannot read manifest {path}: {message}")]
    Manifest { path: PathBuf, message: String },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Templates(#[from] PromptError),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Classification(#[from] ClassificationError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
