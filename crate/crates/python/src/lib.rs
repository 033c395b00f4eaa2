//! Python bindings: metrics, embeddings, example selection, prompt
//! rendering, header classification and whole pipeline runs.

use std::collections::{BTreeSet, HashMap};

use clinsum::classification::{parse_llm_label as parse_label, EnsembleRule};
use clinsum::corpus::{Example, MajorSection, SectionHeader, Task};
use clinsum::embedding::{cosine_similarity as cosine, hash_embed_seeded, EmbeddingIndex as Index, EmbeddingVector};
use clinsum::llm::{prompt_hash as hash_prompt, GenerationConfig};
use clinsum::metrics::{self, tokenize as tok};
use clinsum::pipeline::{run_pipeline as run, write_run, PipelineConfig, PipelineDeps};
use clinsum::prompting::{self, Prompt};
use clinsum::selection::{mmr_select, top_k_similar, SelectionResult};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

fn err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

#[pyclass(frozen, get_all, skip_from_py_object, module = "clinsum_py")]
#[derive(Clone)]
pub struct RougeScore {
    precision: f64,
    recall: f64,
    f1: f64,
}

#[pymethods]
impl RougeScore {
    fn __repr__(&self) -> String {
        format!("RougeScore(precision={}, recall={}, f1={})", self.precision, self.recall, self.f1)
    }
}

impl From<metrics::RougeScore> for RougeScore {
    fn from(s: metrics::RougeScore) -> Self {
        Self { precision: s.precision, recall: s.recall, f1: s.f1 }
    }
}

#[pyclass(frozen, get_all, skip_from_py_object, module = "clinsum_py")]
#[derive(Clone)]
pub struct Extractiveness {
    coverage: f64,
    density: f64,
    compression: f64,
}

#[pymethods]
impl Extractiveness {
    fn __repr__(&self) -> String {
        format!("Extractiveness(coverage={}, density={}, compression={})", self.coverage, self.density, self.compression)
    }
}

#[pyfunction]
fn tokenize(text: &str) -> Vec<String> {
    tok(text).tokens().to_vec()
}

#[pyfunction]
#[pyo3(signature = (candidate, reference, n=1))]
fn rouge_n(candidate: &str, reference: &str, n: usize) -> PyResult<RougeScore> {
    metrics::rouge_n(&tok(candidate), &tok(reference), n).map(Into::into).map_err(err)
}

#[pyfunction]
fn rouge_l(candidate: &str, reference: &str) -> RougeScore {
    metrics::rouge_l(&tok(candidate), &tok(reference)).into()
}

#[pyfunction]
fn extractiveness(article: &str, summary: &str) -> PyResult<Extractiveness> {
    let s = metrics::extractiveness(&tok(article), &tok(summary)).map_err(err)?;
    Ok(Extractiveness { coverage: s.coverage, density: s.density, compression: s.compression })
}

/// Shared fragments as lists of tokens, in summary order.
#[pyfunction]
fn extractive_fragments(article: &str, summary: &str) -> Vec<Vec<String>> {
    let (a, s) = (tok(article), tok(summary));
    metrics::extractive_fragments(&a, &s)
        .into_iter()
        .map(|f| s.tokens()[f.summary_start..f.summary_start + f.length].to_vec())
        .collect()
}

#[pyfunction]
#[pyo3(signature = (text, dimension=512, seed=0))]
fn hash_embed(text: &str, dimension: usize, seed: u64) -> PyResult<Vec<f64>> {
    Ok(hash_embed_seeded(text, dimension, seed).map_err(err)?.values().to_vec())
}

#[pyfunction]
fn cosine_similarity(a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
    let a = EmbeddingVector::new(a).map_err(err)?;
    let b = EmbeddingVector::new(b).map_err(err)?;
    cosine(&a, &b).map_err(err)
}

fn scored(result: SelectionResult) -> Vec<(String, f64)> {
    result.chosen.into_iter().map(|s| (s.id, s.score)).collect()
}

/// Normalized vectors keyed by example id.
#[pyclass(module = "clinsum_py")]
pub struct EmbeddingIndex {
    inner: Index,
}

impl EmbeddingIndex {
    fn query(&self, query: Vec<f64>) -> PyResult<EmbeddingVector> {
        EmbeddingVector::new(query).and_then(|q| q.normalized()).map_err(err)
    }
}

#[pymethods]
impl EmbeddingIndex {
    #[new]
    #[pyo3(signature = (vectors, tag="python"))]
    fn new(vectors: HashMap<String, Vec<f64>>, tag: &str) -> PyResult<Self> {
        let entries = vectors
            .into_iter()
            .map(|(id, v)| EmbeddingVector::new(v).map(|v| (id, v)))
            .collect::<Result<Vec<_>, _>>()
            .map_err(err)?;
        Ok(Self { inner: Index::from_vectors(tag, entries).map_err(err)? })
    }

    /// `k` most similar ids with their cosine scores, best first.
    #[pyo3(signature = (query, k, exclude=None))]
    fn top_k(&self, query: Vec<f64>, k: usize, exclude: Option<Vec<String>>) -> PyResult<Vec<(String, f64)>> {
        let exclude: BTreeSet<String> = exclude.unwrap_or_default().into_iter().collect();
        top_k_similar(&self.inner, &self.query(query)?, k, &exclude).map(scored).map_err(err)
    }

    /// Greedy maximal marginal relevance; scores are the MMR values at pick time.
    #[pyo3(signature = (query, k, lambda_=0.5, exclude=None))]
    fn mmr(&self, query: Vec<f64>, k: usize, lambda_: f64, exclude: Option<Vec<String>>) -> PyResult<Vec<(String, f64)>> {
        let exclude: BTreeSet<String> = exclude.unwrap_or_default().into_iter().collect();
        mmr_select(&self.inner, &self.query(query)?, k, lambda_, &exclude).map(scored).map_err(err)
    }

    #[getter]
    fn dimension(&self) -> usize {
        self.inner.dimension()
    }

    fn ids(&self) -> Vec<String> {
        self.inner.iter().map(|(id, _)| id.to_string()).collect()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

fn header(label: &str) -> PyResult<SectionHeader> {
    SectionHeader::parse(label).map_err(err)
}

/// Examples given as `(id, dialogue, summary)` or `(id, dialogue, summary, header)`.
fn to_examples(rows: Vec<Vec<String>>, task: Task) -> PyResult<Vec<Example>> {
    rows.into_iter()
        .map(|row| {
            let [id, dialogue, summary, rest @ ..] = row.as_slice() else {
                return Err(err("examples are (id, dialogue, summary[, header]) tuples"));
            };
            let header = rest.first().map(|h| header(h)).transpose()?;
            Ok(Example { id: id.clone(), dialogue: dialogue.clone(), summary: summary.clone(), header, task })
        })
        .collect()
}

fn text(p: Result<Prompt, prompting::PromptError>) -> PyResult<String> {
    p.map(|p| p.text).map_err(err)
}

#[pyfunction]
fn render_prompt_selection_a(dialogue: &str, examples: Vec<Vec<String>>, section_header: &str) -> PyResult<String> {
    let ex = to_examples(examples, Task::A)?;
    let refs: Vec<&Example> = ex.iter().collect();
    text(prompting::render_prompt_selection_a(dialogue, &refs, header(section_header)?))
}

#[pyfunction]
fn render_prompt_selection_b(dialogue: &str, examples: Vec<Vec<String>>) -> PyResult<String> {
    let ex = to_examples(examples, Task::B)?;
    let refs: Vec<&Example> = ex.iter().collect();
    text(prompting::render_prompt_selection_b(dialogue, &refs))
}

#[pyfunction]
fn render_zero_shot_b(dialogue: &str) -> PyResult<String> {
    text(prompting::render_zero_shot_b(dialogue))
}

#[pyfunction]
fn render_section_fewshot_a(dialogue: &str, section: &str) -> PyResult<String> {
    let section = MajorSection::parse(section).ok_or_else(|| err(format!("unknown major section `{section}`")))?;
    text(prompting::render_section_fewshot_a(dialogue, section, &prompting::TemplateSet::builtin()))
}

#[pyfunction]
fn render_header_classify(dialogue: &str) -> PyResult<String> {
    text(prompting::render_header_classify(dialogue))
}

/// Canonical header name, e.g. `"genhx"` -> `"GENHX"`.
#[pyfunction]
fn parse_header(label: &str) -> PyResult<String> {
    Ok(header(label)?.to_string())
}

#[pyfunction]
fn parse_llm_label(completion: &str) -> PyResult<String> {
    parse_label(completion).map(|h| h.to_string()).map_err(err)
}

/// Fine-tuned label if it is one of `override_labels`, otherwise the LLM label.
#[pyfunction]
#[pyo3(signature = (llm, finetuned, override_labels=None))]
fn ensemble(llm: &str, finetuned: &str, override_labels: Option<Vec<String>>) -> PyResult<String> {
    let rule = match override_labels {
        Some(labels) => EnsembleRule::new(labels.iter().map(|l| header(l)).collect::<PyResult<Vec<_>>>()?),
        None => EnsembleRule::default(),
    };
    Ok(rule.decide(header(llm)?, header(finetuned)?).to_string())
}

/// Cache key of a prompt under a generation config given as JSON.
#[pyfunction]
#[pyo3(signature = (prompt, generation_json=None))]
fn prompt_hash(prompt: &str, generation_json: Option<&str>) -> PyResult<String> {
    let config: GenerationConfig = match generation_json {
        Some(j) => serde_json::from_str(j).map_err(err)?,
        None => GenerationConfig::default(),
    };
    Ok(hash_prompt(prompt, &config))
}

/// Run the pipeline for a JSON config. Returns JSON with `manifest`,
/// `report`, `generations` and, when `write` is true, `run_dir`.
#[pyfunction]
#[pyo3(signature = (config_json, write=false))]
fn run_pipeline(py: Python<'_>, config_json: &str, write: bool) -> PyResult<String> {
    let cfg: PipelineConfig = serde_json::from_str(config_json).map_err(err)?;
    py.detach(|| {
        let deps = PipelineDeps::from_config(&cfg).map_err(|e| e.to_string())?;
        let output = run(&cfg, &deps).map_err(|e| e.to_string())?;
        let run_dir = if write { Some(write_run(&cfg.out_dir, &output).map_err(|e| e.to_string())?) } else { None };
        let value = serde_json::json!({
            "manifest": output.manifest,
            "report": output.report,
            "generations": output.generations,
            "run_dir": run_dir,
        });
        Ok::<_, String>(serde_json::to_string(&value).expect("json"))
    })
    .map_err(err)
}

#[pymodule]
fn clinsum_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<RougeScore>()?;
    m.add_class::<Extractiveness>()?;
    m.add_class::<EmbeddingIndex>()?;
    m.add_function(wrap_pyfunction!(tokenize, m)?)?;
    m.add_function(wrap_pyfunction!(rouge_n, m)?)?;
    m.add_function(wrap_pyfunction!(rouge_l, m)?)?;
    m.add_function(wrap_pyfunction!(extractiveness, m)?)?;
    m.add_function(wrap_pyfunction!(extractive_fragments, m)?)?;
    m.add_function(wrap_pyfunction!(hash_embed, m)?)?;
    m.add_function(wrap_pyfunction!(cosine_similarity, m)?)?;
    m.add_function(wrap_pyfunction!(render_prompt_selection_a, m)?)?;
    m.add_function(wrap_pyfunction!(render_prompt_selection_b, m)?)?;
    m.add_function(wrap_pyfunction!(render_zero_shot_b, m)?)?;
    m.add_function(wrap_pyfunction!(render_section_fewshot_a, m)?)?;
    m.add_function(wrap_pyfunction!(render_header_classify, m)?)?;
    m.add_function(wrap_pyfunction!(parse_header, m)?)?;
    m.add_function(wrap_pyfunction!(parse_llm_label, m)?)?;
    m.add_function(wrap_pyfunction!(ensemble, m)?)?;
    m.add_function(wrap_pyfunction!(prompt_hash, m)?)?;
    m.add_function(wrap_pyfunction!(run_pipeline, m)?)?;
    Ok(())
}
