//! Retrieval-based few-shot summarization of doctor–patient dialogues.
//!
//! The crate is organised along the pipeline:
//!
//! * [`corpus`] loads and splits the section-level (task A) and full-note
//!   (task B) datasets and owns the section-header vocabulary.
//! * [`embedding`] turns dialogues into unit vectors through a pluggable
//!   [`embedding::EmbeddingProvider`].
//! * [`selection`] picks in-context examples by top-k cosine similarity or
//!   maximal marginal relevance.
//! * [`prompting`] renders every prompt strategy into byte-stable text.
//! * [`llm`] sends prompts to a completion provider behind a
//!   content-addressed cache.
//! * [`classification`] parses header predictions and applies the
//!   LLM/fine-tuned ensemble rule.
//! * [`metrics`] computes ROUGE, extractive fragment statistics and corpus
//!   reports.
//! * [`pipeline`] wires everything together into replayable runs.

pub mod classification;
pub mod corpus;
pub mod digest;
pub mod embedding;
pub mod llm;
pub mod metrics;
pub mod pipeline;
pub mod prompting;
pub mod selection;

pub use classification::{EnsembleRule, HeaderPrediction, PredictionSource};
pub use corpus::{ColumnMapping, Example, ExampleSet, MajorSection, SectionHeader, Task};
pub use embedding::{EmbeddingIndex, EmbeddingProvider, EmbeddingVector};
pub use llm::{CompletionProvider, GenerationConfig, ResponseCache};
pub use metrics::{MetricReport, RougeScore, TokenSequence};
pub use prompting::{Prompt, Strategy, TemplateSet};
pub use selection::{SelectionMethod, SelectionResult};
