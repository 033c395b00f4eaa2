use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::corpus::{load_examples, split_train_validation, Example, ExampleSet, MajorSection, Task};
use crate::digest::{file_sha256_hex, sha256_hex};
use crate::embedding::{embed_corpus, embed_texts, EmbeddingProvider, EmbeddingVector};
use crate::llm::{prompt_hash, Completion, LlmClient, LlmError, ResponseCache};
use crate::metrics::{corpus_report, MetricReport};
use crate::prompting::{Prompt, PromptError, PromptRenderer, Strategy, TemplateSet};
use crate::selection::{mmr_select, top_k_similar, SelectionMethod, SelectionResult};

use super::config::{build_completion_provider, build_embedder, EmbeddingKind, EvalSplit, PipelineConfig, SummaryStrategy};
use super::PipelineError;

pub const MANIFEST_VERSION: u32 = 1;

/// Providers and templates used by a run.
#[derive(Clone)]
pub struct PipelineDeps {
    pub embedder: Arc<dyn EmbeddingProvider>,
    pub llm: LlmClient,
    pub renderer: PromptRenderer,
}

impl PipelineDeps {
    /// Providers, cache and templates as described by `cfg`.
    pub fn from_config(cfg: &PipelineConfig) -> Result<Self, PipelineError> {
        let embedder = build_embedder(&cfg.embedding)?;
        let mut llm = LlmClient::new(build_completion_provider(&cfg.llm)).with_retry(cfg.llm.retry.clone());
        if let Some(dir) = &cfg.cache_dir {
            llm = llm.with_cache(Arc::new(ResponseCache::open(dir)?));
        }
        let templates = match &cfg.templates_dir {
            Some(dir) => TemplateSet::with_overrides_from(dir)?,
            None => TemplateSet::builtin(),
        };
        Ok(Self { embedder, llm, renderer: PromptRenderer::new(templates) })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputDigest {
    pub role: String,
    pub path: PathBuf,
    pub sha256: String,
}

pub fn input_digest(role: &str, path: &Path) -> Result<InputDigest, PipelineError> {
    Ok(InputDigest { role: role.into(), path: path.to_path_buf(), sha256: file_sha256_hex(path)? })
}

/// The retrieval corpus and the examples to summarize.
#[derive(Debug, Clone)]
pub struct RunData {
    pub retrieval: ExampleSet,
    pub eval: ExampleSet,
    pub inputs: Vec<InputDigest>,
    /// Whether `eval` carries reference summaries.
    pub references: bool,
}

pub fn load_run_data(cfg: &PipelineConfig) -> Result<RunData, PipelineError> {
    let cols = cfg.columns();
    let train = load_examples(&cfg.train_path, &cols, cfg.task)?;
    let mut inputs = vec![input_digest("train", &cfg.train_path)?];
    let (retrieval, held_out, held_out_refs) = match &cfg.eval_path {
        Some(path) => {
            let eval_cols = cfg.eval_columns();
            inputs.push(input_digest("eval", path)?);
            let eval = load_examples(path, &eval_cols, cfg.task)?;
            (train, eval, eval_cols.summary.is_some())
        }
        None => {
            let (t, v) = split_train_validation(&train, cfg.train_fraction, cfg.seed)?;
            (t, v, cols.summary.is_some())
        }
    };
    if let (EmbeddingKind::Precomputed, Some(path)) = (cfg.embedding.provider, &cfg.embedding.vectors_path) {
        inputs.push(input_digest("embeddings", path)?);
    }
    let (eval, references) = match cfg.evaluate_on {
        EvalSplit::Validation => (held_out, held_out_refs),
        EvalSplit::Train => (retrieval.clone(), cols.summary.is_some()),
    };
    let eval = match cfg.limit {
        Some(n) if n < eval.len() => ExampleSet::new(eval.task(), eval.examples()[..n].to_vec())?,
        _ => eval,
    };
    if eval.is_empty() || retrieval.is_empty() {
        return Err(crate::corpus::CorpusError::EmptySet.into());
    }
    Ok(RunData { retrieval, eval, inputs, references })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptRecord {
    /// `main`, `stage-1`/`stage-2`, or `section:<NAME>`.
    pub stage: String,
    pub strategy: Strategy,
    pub prompt_hash: String,
    pub example_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestExample {
    pub id: String,
    pub selection: Option<SelectionResult>,
    pub prompts: Vec<PromptRecord>,
    pub output_sha256: Option<String>,
    pub error: Option<String>,
}

/// Everything that determines a run's outputs. Contains no wall-clock or
/// cache-state fields, so identical inputs give byte-identical manifests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub manifest_version: u32,
    pub config: PipelineConfig,
    pub config_sha256: String,
    pub inputs: Vec<InputDigest>,
    pub embedding_provider: Option<String>,
    pub completion_provider: String,
    pub examples: Vec<ManifestExample>,
    pub completed: usize,
    pub failed: usize,
}

impl RunManifest {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes") + "\n"
    }

    pub fn prompt_hashes(&self) -> BTreeSet<&str> {
        self.examples
            .iter()
            .flat_map(|e| e.prompts.iter().map(|p| p.prompt_hash.as_str()))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionTiming {
    pub id: String,
    pub stage: String,
    pub prompt_hash: String,
    pub from_cache: bool,
    pub latency_ms: u64,
}

/// Wall-clock and cache facts kept out of the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunTiming {
    pub started_at: DateTime<Utc>,
    pub finished_at: DateTime<Utc>,
    pub completions: Vec<CompletionTiming>,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub manifest: RunManifest,
    pub report: Option<MetricReport>,
    /// Final text per example id, for examples that completed.
    pub generations: BTreeMap<String, String>,
    /// Evaluation ids in input order.
    pub order: Vec<String>,
    pub timing: RunTiming,
}

fn is_member(retrieval: &ExampleSet, ex: &Example) -> bool {
    retrieval.get(&ex.id).is_some_and(|r| r.dialogue == ex.dialogue)
}

fn select_examples(
    cfg: &PipelineConfig,
    deps: &PipelineDeps,
    data: &RunData,
    k: usize,
) -> Result<Vec<SelectionResult>, PipelineError> {
    let opts = &cfg.embedding.options;
    let index = embed_corpus(deps.embedder.as_ref(), &data.retrieval, opts)?;
    let outside: Vec<(&str, &str)> = data
        .eval
        .iter()
        .filter(|e| !is_member(&data.retrieval, e))
        .map(|e| (e.id.as_str(), e.dialogue.as_str()))
        .collect();
    let vectors = embed_texts(deps.embedder.as_ref(), &outside, opts)?;
    let mut fresh: BTreeMap<&str, EmbeddingVector> = outside.iter().map(|(id, _)| *id).zip(vectors).collect();

    let mut out = Vec::with_capacity(data.eval.len());
    for ex in &data.eval {
        let member = is_member(&data.retrieval, ex);
        let query = if member {
            index.get(&ex.id).expect("corpus member is indexed").clone()
        } else {
            fresh.remove(ex.id.as_str()).expect("query embedded").normalized()?
        };
        let exclude: BTreeSet<String> =
            if cfg.self_exclude && member { BTreeSet::from([ex.id.clone()]) } else { BTreeSet::new() };
        let selection = match cfg.method {
            SelectionMethod::TopKSimilarity => top_k_similar(&index, &query, k, &exclude),
            SelectionMethod::Mmr => mmr_select(&index, &query, k, cfg.lambda, &exclude),
        }
        .map_err(|source| PipelineError::Selection { id: ex.id.clone(), source })?;
        out.push(selection.with_query_id(ex.id.clone()));
    }
    Ok(out)
}

type Staged = Vec<(String, Prompt)>;

fn first_stage(
    cfg: &PipelineConfig,
    renderer: &PromptRenderer,
    retrieval: &ExampleSet,
    ex: &Example,
    selection: Option<&SelectionResult>,
) -> Result<Staged, PromptError> {
    let single = |p: Prompt| vec![("main".to_string(), p)];
    Ok(match cfg.strategy {
        SummaryStrategy::PromptSelection => {
            let selection = selection.expect("selection computed for prompt selection");
            let exemplars: Vec<&Example> = selection
                .ids()
                .into_iter()
                .map(|id| retrieval.get(id).expect("selected ids come from the corpus"))
                .collect();
            let prompt = match cfg.task {
                Task::A => renderer.prompt_selection_a(&ex.dialogue, &exemplars, ex.header.expect("task A header"))?,
                Task::B if exemplars.len() == 1 => renderer.prompt_selection_b(&ex.dialogue, &exemplars)?,
                Task::B => renderer.prompt_selection_b_long(&ex.dialogue, &exemplars)?,
            };
            single(prompt)
        }
        SummaryStrategy::ZeroShot => single(renderer.zero_shot_b(&ex.dialogue)?),
        SummaryStrategy::SectionFewshot => {
            let section = ex.header.expect("task A header").major_sections()[0];
            single(renderer.section_fewshot_a(&ex.dialogue, section)?)
        }
        SummaryStrategy::PerspectiveShift => vec![("stage-1".into(), renderer.perspective_shift(&ex.dialogue, 1)?)],
        SummaryStrategy::TwoStage => vec![("stage-1".into(), renderer.two_stage(&ex.dialogue, 1)?)],
        SummaryStrategy::SectionAssembly => MajorSection::ALL
            .iter()
            .map(|&s| Ok((format!("section:{}", s.as_str()), renderer.section_fewshot_a(&ex.dialogue, s)?)))
            .collect::<Result<_, PromptError>>()?,
    })
}

fn second_stage(strategy: SummaryStrategy, renderer: &PromptRenderer, input: &str) -> Option<Result<Prompt, PromptError>> {
    match strategy {
        SummaryStrategy::PerspectiveShift => Some(renderer.perspective_shift(input, 2)),
        SummaryStrategy::TwoStage => Some(renderer.two_stage(input, 2)),
        _ => None,
    }
}

#[derive(Default)]
struct ExampleState {
    prompts: Vec<PromptRecord>,
    outputs: Vec<(String, String)>,
    error: Option<String>,
}

struct Job {
    example: usize,
    stage: String,
    prompt: Prompt,
}

fn execute(
    cfg: &PipelineConfig,
    llm: &LlmClient,
    jobs: Vec<Job>,
    states: &mut [ExampleState],
    ids: &[String],
    timing: &mut Vec<CompletionTiming>,
) -> Result<(), PipelineError> {
    for job in &jobs {
        states[job.example].prompts.push(PromptRecord {
            stage: job.stage.clone(),
            strategy: job.prompt.strategy,
            prompt_hash: prompt_hash(&job.prompt.text, &cfg.generation),
            example_ids: job.prompt.example_ids.clone(),
        });
    }
    let texts: Vec<&str> = jobs.iter().map(|j| j.prompt.text.as_str()).collect();
    let results: Vec<Result<Completion, LlmError>> = llm.run_batch(&texts, &cfg.generation, cfg.max_in_flight)?;
    for (job, result) in jobs.iter().zip(results) {
        let state = &mut states[job.example];
        match result {
            Ok(c) => {
                timing.push(CompletionTiming {
                    id: ids[job.example].clone(),
                    stage: job.stage.clone(),
                    prompt_hash: c.prompt_hash.clone(),
                    from_cache: c.from_cache,
                    latency_ms: c.provider_latency_ms,
                });
                state.outputs.push((job.stage.clone(), c.text));
            }
            Err(e) => {
                tracing::warn!(id = %ids[job.example], stage = %job.stage, error = %e, "completion failed");
                if state.error.is_none() {
                    state.error = Some(format!("{}: {e}", job.stage));
                }
            }
        }
    }
    Ok(())
}

fn final_text(strategy: SummaryStrategy, state: &ExampleState) -> Option<String> {
    if state.error.is_some() {
        return None;
    }
    match strategy {
        SummaryStrategy::SectionAssembly => {
            let parts: Vec<String> = MajorSection::ALL
                .iter()
                .zip(&state.outputs)
                .map(|(s, (_, text))| format!("{}\n{}", s.title(), text.trim()))
                .collect();
            Some(parts.join("\n\n"))
        }
        _ => state.outputs.last().map(|(_, t)| t.clone()),
    }
}

/// Execute one run in memory. Per-example prompt or completion failures are
/// recorded in the manifest and the run continues.
pub fn run_pipeline(cfg: &PipelineConfig, deps: &PipelineDeps) -> Result<RunOutput, PipelineError> {
    let cfg = cfg.resolved()?;
    let started_at = Utc::now();
    let data = load_run_data(&cfg)?;
    let k = cfg.effective_k();
    let n = data.eval.len();
    let ids: Vec<String> = data.eval.iter().map(|e| e.id.clone()).collect();

    let retrieval = cfg.strategy == SummaryStrategy::PromptSelection;
    let selections: Vec<Option<SelectionResult>> = if retrieval {
        select_examples(&cfg, deps, &data, k)?.into_iter().map(Some).collect()
    } else {
        vec![None; n]
    };

    let mut states: Vec<ExampleState> = (0..n).map(|_| ExampleState::default()).collect();
    let mut timing = Vec::new();
    let mut jobs = Vec::new();
    for (i, ex) in data.eval.iter().enumerate() {
        match first_stage(&cfg, &deps.renderer, &data.retrieval, ex, selections[i].as_ref()) {
            Ok(staged) => jobs.extend(staged.into_iter().map(|(stage, prompt)| Job { example: i, stage, prompt })),
            Err(e) => states[i].error = Some(format!("prompt: {e}")),
        }
    }
    execute(&cfg, &deps.llm, jobs, &mut states, &ids, &mut timing)?;

    let mut jobs = Vec::new();
    for (i, state) in states.iter_mut().enumerate() {
        if state.error.is_some() {
            continue;
        }
        let Some((_, input)) = state.outputs.last() else { continue };
        match second_stage(cfg.strategy, &deps.renderer, input) {
            Some(Ok(prompt)) => jobs.push(Job { example: i, stage: "stage-2".into(), prompt }),
            Some(Err(e)) => state.error = Some(format!("stage-2 prompt: {e}")),
            None => {}
        }
    }
    if !jobs.is_empty() {
        execute(&cfg, &deps.llm, jobs, &mut states, &ids, &mut timing)?;
    }

    let mut generations = BTreeMap::new();
    let mut examples = Vec::with_capacity(n);
    for ((id, state), selection) in ids.iter().zip(states).zip(selections) {
        let text = final_text(cfg.strategy, &state);
        let output_sha256 = text.as_ref().map(|t| sha256_hex(t.as_bytes()));
        if let Some(t) = text {
            generations.insert(id.clone(), t);
        }
        examples.push(ManifestExample {
            id: id.clone(),
            selection,
            prompts: state.prompts,
            output_sha256,
            error: state.error,
        });
    }
    let report = if data.references { Some(corpus_report(&data.eval, &generations)?) } else { None };
    let failed = examples.iter().filter(|e| e.error.is_some()).count();
    let manifest = RunManifest {
        manifest_version: MANIFEST_VERSION,
        config_sha256: cfg.digest(),
        config: cfg,
        inputs: data.inputs,
        embedding_provider: retrieval.then(|| deps.embedder.tag()),
        completion_provider: deps.llm.provider.name(),
        completed: n - failed,
        failed,
        examples,
    };
    Ok(RunOutput {
        manifest,
        report,
        generations,
        order: ids,
        timing: RunTiming { started_at, finished_at: Utc::now(), completions: timing },
    })
}

fn write_generations(output: &RunOutput, writer: impl std::io::Write) -> csv::Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(["id", "generation"])?;
    for id in &output.order {
        if let Some(text) = output.generations.get(id) {
            wtr.write_record([id.as_str(), text.as_str()])?;
        }
    }
    wtr.flush()?;
    Ok(())
}

/// Create `<out_root>/<stem>`, appending `-2`, `-3`, ... if it exists.
fn create_unique_dir(out_root: &Path, stem: &str) -> std::io::Result<PathBuf> {
    std::fs::create_dir_all(out_root)?;
    let mut dir = out_root.join(stem);
    let mut suffix = 2;
    loop {
        match std::fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                dir = out_root.join(format!("{stem}-{suffix}"));
                suffix += 1;
            }
            Err(e) => return Err(e),
        }
    }
}

/// Fresh directory `<out_root>/<UTC now>-<kind>-<digest prefix>` for
/// experiment sweeps.
pub fn create_output_dir(out_root: &Path, kind: &str, config_sha256: &str) -> Result<PathBuf, PipelineError> {
    let stem = format!("{}-{kind}-{}", Utc::now().format("%Y%m%dT%H%M%SZ"), &config_sha256[..8.min(config_sha256.len())]);
    Ok(create_unique_dir(out_root, &stem)?)
}

/// Read an `(id, generation)` CSV as written into run directories.
pub fn read_generations(reader: impl std::io::Read) -> Result<BTreeMap<String, String>, PipelineError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let mut out = BTreeMap::new();
    for record in rdr.records() {
        let record = record?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let (Some(id), Some(text)) = (record.get(0), record.get(1)) else {
            return Err(PipelineError::Config(format!("generations line {line}: expected id and generation")));
        };
        if out.insert(id.trim().to_string(), text.to_string()).is_some() {
            return Err(PipelineError::Config(format!("generations line {line}: duplicate id `{}`", id.trim())));
        }
    }
    Ok(out)
}

/// Persist a run under `<out_root>/<UTC timestamp>-<config digest prefix>`
/// and return that directory.
pub fn write_run(out_root: &Path, output: &RunOutput) -> Result<PathBuf, PipelineError> {
    let manifest_json = output.manifest.to_json();
    let stem = format!(
        "{}-{}",
        output.timing.started_at.format("%Y%m%dT%H%M%SZ"),
        &output.manifest.config_sha256[..8]
    );
    let dir = create_unique_dir(out_root, &stem)?;
    std::fs::write(dir.join("manifest.json"), &manifest_json)?;
    std::fs::write(
        dir.join("timing.json"),
        serde_json::to_string_pretty(&output.timing).expect("timing serializes") + "\n",
    )?;
    write_generations(output, std::fs::File::create(dir.join("generations.csv"))?)?;
    if let Some(report) = &output.report {
        std::fs::write(dir.join("report.json"), report.to_json() + "\n")?;
        std::fs::write(dir.join("report.txt"), report.summary_table())?;
        report.write_csv(std::fs::File::create(dir.join("report.csv"))?)?;
    }
    Ok(dir)
}

/// [`run_pipeline`] followed by [`write_run`] into `cfg.out_dir`.
pub fn cmd_run(cfg: &PipelineConfig, deps: &PipelineDeps) -> Result<(RunOutput, PathBuf), PipelineError> {
    let output = run_pipeline(cfg, deps)?;
    let dir = write_run(&cfg.out_dir, &output)?;
    Ok((output, dir))
}

pub fn read_manifest(path: &Path) -> Result<RunManifest, PipelineError> {
    let err = |message: String| PipelineError::Manifest { path: path.to_path_buf(), message };
    let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
    serde_json::from_str(&text).map_err(|e| err(e.to_string()))
}

/// The config recorded in `manifest`, after checking that every input file
/// still has its recorded digest.
pub fn replay_config(manifest: &RunManifest) -> Result<PipelineConfig, PipelineError> {
    for input in &manifest.inputs {
        let now = file_sha256_hex(&input.path)?;
        if now != input.sha256 {
            return Err(PipelineError::Config(format!(
                "{} input {} changed since the run (sha256 {} != {})",
                input.role,
                input.path.display(),
                now,
                input.sha256
            )));
        }
    }
    Ok(manifest.config.clone())
}
