use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::classification::{
    accuracy, load_finetuned_predictions, parse_llm_label, read_predictions, AccuracyReport, HeaderPrediction,
    PredictionSource,
};
use crate::corpus::{SectionHeader, Task};
use crate::llm::{prompt_hash, CacheMode};
use crate::metrics::MetricReport;

use super::config::{PipelineConfig, SummaryStrategy};
use super::run::{load_run_data, run_pipeline, PipelineDeps, RunOutput};
use super::PipelineError;

fn require_report(output: &RunOutput) -> Result<&MetricReport, PipelineError> {
    output.report.as_ref().ok_or(PipelineError::NoReferences)
}

fn pad_table(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for row in rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let line = |cells: Vec<&str>| {
        cells
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (c, w))| if i == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") })
            .collect::<Vec<_>>()
            .join("  ")
            .trim_end()
            .to_string()
    };
    let mut out = line(header.to_vec()) + "\n";
    for row in rows {
        out += &line(row.iter().map(String::as_str).collect());
        out.push('\n');
    }
    out
}

fn pct(x: f64) -> String {
    format!("{:.2}", 100.0 * x)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub k: usize,
    pub rouge1_f1: f64,
    pub rouge2_f1: f64,
    pub rouge_l_f1: f64,
    pub coverage: f64,
    pub density: f64,
    pub compression: f64,
    pub evaluated: usize,
    pub failed: usize,
    pub config_sha256: String,
}

/// One row per k, in the order requested.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_table(&self) -> String {
        let rows: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| {
                vec![
                    r.k.to_string(),
                    pct(r.rouge1_f1),
                    pct(r.rouge2_f1),
                    pct(r.rouge_l_f1),
                    format!("{:.3}", r.coverage),
                    format!("{:.3}", r.density),
                    format!("{:.3}", r.compression),
                    r.evaluated.to_string(),
                ]
            })
            .collect();
        pad_table(&["k", "R1", "R2", "RL", "EFC", "EFD", "CR", "n"], &rows)
    }
}

/// Run the pipeline once per value of k with shared providers and cache.
pub fn cmd_ablate_k(
    cfg: &PipelineConfig,
    deps: &PipelineDeps,
    k_values: &[usize],
) -> Result<(AblationReport, Vec<RunOutput>), PipelineError> {
    if cfg.task != Task::A {
        return Err(PipelineError::TaskAOnly("k ablation"));
    }
    if k_values.is_empty() {
        return Err(PipelineError::EmptyKList);
    }
    if cfg.strategy != SummaryStrategy::PromptSelection {
        return Err(PipelineError::Config("k ablation needs the prompt-selection strategy".into()));
    }
    let mut rows = Vec::with_capacity(k_values.len());
    let mut outputs = Vec::with_capacity(k_values.len());
    for &k in k_values {
        let run_cfg = PipelineConfig { k: Some(k), ..cfg.clone() };
        let output = run_pipeline(&run_cfg, deps)?;
        let report = require_report(&output)?;
        let m = &report.macro_avg;
        rows.push(AblationRow {
            k,
            rouge1_f1: m.rouge1.f1,
            rouge2_f1: m.rouge2.f1,
            rouge_l_f1: m.rouge_l.f1,
            coverage: m.generated_extractiveness.coverage,
            density: m.generated_extractiveness.density,
            compression: m.generated_extractiveness.compression,
            evaluated: report.evaluated,
            failed: output.manifest.failed,
            config_sha256: output.manifest.config_sha256.clone(),
        });
        outputs.push(output);
    }
    Ok((AblationReport { rows }, outputs))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spread {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    /// Population standard deviation.
    pub stddev: f64,
}

impl Spread {
    pub fn of(xs: &[f64]) -> Option<Spread> {
        if xs.is_empty() {
            return None;
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        Some(Spread {
            min: xs.iter().copied().fold(f64::INFINITY, f64::min),
            max: xs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            mean,
            stddev: var.sqrt(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityRow {
    pub run: usize,
    pub rouge1_f1: f64,
    pub rouge2_f1: f64,
    pub rouge_l_f1: f64,
    pub evaluated: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub runs: Vec<StabilityRow>,
    /// Metric name to spread across runs.
    pub aggregate: BTreeMap<String, Spread>,
}

impl StabilityReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Run rows followed by a single aggregate row (mean ± stddev).
    pub fn to_table(&self) -> String {
        let mut rows: Vec<Vec<String>> = self
            .runs
            .iter()
            .map(|r| vec![format!("Run {}", r.run), pct(r.rouge1_f1), pct(r.rouge2_f1), pct(r.rouge_l_f1)])
            .collect();
        let agg = |name: &str| {
            self.aggregate
                .get(name)
                .map(|s| format!("{} ± {}", pct(s.mean), pct(s.stddev)))
                .unwrap_or_default()
        };
        rows.push(vec!["Mean ± sd".into(), agg("rouge1_f1"), agg("rouge2_f1"), agg("rouge_l_f1")]);
        pad_table(&["", "R1", "R2", "RL"], &rows)
    }
}

/// Repeat the same run `n_runs` times. With `cache_bypass` every run goes
/// to the provider (and refreshes the cache); otherwise warm entries are
/// reused and a deterministic provider yields zero spread.
pub fn cmd_stability(
    cfg: &PipelineConfig,
    deps: &PipelineDeps,
    n_runs: usize,
    cache_bypass: bool,
) -> Result<(StabilityReport, Vec<RunOutput>), PipelineError> {
    if n_runs < 2 {
        return Err(PipelineError::TooFewRuns(n_runs));
    }
    let mut deps = deps.clone();
    if cache_bypass {
        deps.llm.mode = CacheMode::Refresh;
    }
    let mut runs = Vec::with_capacity(n_runs);
    let mut outputs = Vec::with_capacity(n_runs);
    for run in 1..=n_runs {
        let output = run_pipeline(cfg, &deps)?;
        let report = require_report(&output)?;
        let m = &report.macro_avg;
        runs.push(StabilityRow {
            run,
            rouge1_f1: m.rouge1.f1,
            rouge2_f1: m.rouge2.f1,
            rouge_l_f1: m.rouge_l.f1,
            evaluated: report.evaluated,
        });
        outputs.push(output);
    }
    let column = |f: fn(&StabilityRow) -> f64| runs.iter().map(f).collect::<Vec<_>>();
    let mut aggregate = BTreeMap::new();
    for (name, values) in [
        ("rouge1_f1", column(|r| r.rouge1_f1)),
        ("rouge2_f1", column(|r| r.rouge2_f1)),
        ("rouge_l_f1", column(|r| r.rouge_l_f1)),
    ] {
        aggregate.insert(name.to_string(), Spread::of(&values).expect("at least two runs"));
    }
    Ok((StabilityReport { runs, aggregate }, outputs))
}

/// Where LLM header predictions come from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LlmLabelSource {
    /// Prompt the configured completion provider.
    Provider,
    /// Read `(example_id, label)` rows from a CSV file.
    File(PathBuf),
    /// Evaluate the fine-tuned predictions alone.
    None,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassifyOptions {
    pub llm_labels: LlmLabelSource,
    pub finetuned_path: Option<PathBuf>,
    pub ensemble: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassifyReport {
    pub total: usize,
    pub override_labels: Vec<SectionHeader>,
    pub llm: Option<AccuracyReport>,
    pub finetuned: Option<AccuracyReport>,
    pub ensemble: Option<AccuracyReport>,
    /// Examples whose LLM output held no valid label. They count as wrong
    /// in the LLM-only accuracy; the ensemble falls back to the fine-tuned
    /// label for them.
    pub unparseable: Vec<String>,
    /// Examples whose completion failed outright.
    pub failed: Vec<String>,
    /// Fine-tuned predictions for ids outside the evaluation set.
    pub ignored_finetuned: usize,
    /// Prompt hash per example when labels came from the provider.
    pub prompt_hashes: BTreeMap<String, String>,
    pub predictions: Vec<HeaderPrediction>,
}

impl ClassifyReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_table(&self) -> String {
        let mut rows = Vec::new();
        for (name, r) in [("LLM", &self.llm), ("Fine-tuned", &self.finetuned), ("Ensemble", &self.ensemble)] {
            if let Some(r) = r {
                rows.push(vec![name.to_string(), pct(r.accuracy), r.correct.to_string(), r.total.to_string()]);
            }
        }
        pad_table(&["Classifier", "Accuracy", "Correct", "Total"], &rows)
    }
}

/// Accuracy of LLM-only, fine-tuned-only and ensemble header predictions on
/// the evaluation set.
pub fn cmd_classify(
    cfg: &PipelineConfig,
    deps: &PipelineDeps,
    opts: &ClassifyOptions,
) -> Result<ClassifyReport, PipelineError> {
    if cfg.task != Task::A {
        return Err(PipelineError::TaskAOnly("header classification"));
    }
    if opts.ensemble && opts.finetuned_path.is_none() {
        return Err(PipelineError::MissingPredictions);
    }
    if opts.ensemble && opts.llm_labels == LlmLabelSource::None {
        return Err(PipelineError::MissingLlmLabels);
    }
    let cfg = cfg.resolved()?;
    let data = load_run_data(&cfg)?;
    let gold = &data.eval;
    let ids: BTreeSet<&str> = gold.iter().map(|e| e.id.as_str()).collect();

    let mut unparseable = Vec::new();
    let mut failed = Vec::new();
    let mut prompt_hashes = BTreeMap::new();
    // id -> parsed label; None for unparseable or failed completions
    let mut llm_labels: BTreeMap<String, Option<SectionHeader>> = BTreeMap::new();
    match &opts.llm_labels {
        LlmLabelSource::None => {}
        LlmLabelSource::File(path) => {
            for p in read_predictions(std::fs::File::open(path)?, PredictionSource::Llm)? {
                if ids.contains(p.example_id.as_str()) {
                    llm_labels.insert(p.example_id, Some(p.label));
                }
            }
        }
        LlmLabelSource::Provider => {
            let prompts = gold
                .iter()
                .map(|ex| {
                    deps.renderer
                        .header_classify(&ex.dialogue)
                        .map_err(|source| PipelineError::Prompt { id: ex.id.clone(), source })
                })
                .collect::<Result<Vec<_>, _>>()?;
            let texts: Vec<&str> = prompts.iter().map(|p| p.text.as_str()).collect();
            let results = deps.llm.run_batch(&texts, &cfg.generation, cfg.max_in_flight)?;
            for ((ex, prompt), result) in gold.iter().zip(&prompts).zip(results) {
                prompt_hashes.insert(ex.id.clone(), prompt_hash(&prompt.text, &cfg.generation));
                let label = match result {
                    Ok(c) => match parse_llm_label(&c.text) {
                        Ok(h) => Some(h),
                        Err(_) => {
                            unparseable.push(ex.id.clone());
                            None
                        }
                    },
                    Err(e) => {
                        tracing::warn!(id = %ex.id, error = %e, "classification completion failed");
                        failed.push(ex.id.clone());
                        None
                    }
                };
                llm_labels.insert(ex.id.clone(), label);
            }
        }
    }

    let mut ignored_finetuned = 0;
    let finetuned: Option<BTreeMap<String, SectionHeader>> = match &opts.finetuned_path {
        Some(path) => {
            let mut map = BTreeMap::new();
            for p in load_finetuned_predictions(path)? {
                if ids.contains(p.example_id.as_str()) {
                    map.insert(p.example_id, p.label);
                } else {
                    ignored_finetuned += 1;
                }
            }
            Some(map)
        }
        None => None,
    };

    let score = |preds: &[HeaderPrediction], unscored: usize| -> Result<AccuracyReport, PipelineError> {
        let mut r = accuracy(preds, gold)?;
        r.total += unscored;
        r.accuracy = if r.total == 0 { 0.0 } else { r.correct as f64 / r.total as f64 };
        Ok(r)
    };

    let llm_report = if opts.llm_labels == LlmLabelSource::None {
        None
    } else {
        let preds: Vec<HeaderPrediction> = gold
            .iter()
            .filter_map(|ex| {
                llm_labels
                    .get(&ex.id)
                    .copied()
                    .flatten()
                    .map(|h| HeaderPrediction::new(ex.id.clone(), h, PredictionSource::Llm))
            })
            .collect();
        let unscored = llm_labels.values().filter(|l| l.is_none()).count();
        Some(score(&preds, unscored)?)
    };

    let finetuned_report = match &finetuned {
        Some(map) => {
            let preds: Vec<HeaderPrediction> = gold
                .iter()
                .filter_map(|ex| map.get(&ex.id).map(|&h| HeaderPrediction::new(ex.id.clone(), h, PredictionSource::Finetuned)))
                .collect();
            Some(score(&preds, 0)?)
        }
        None => None,
    };

    let rule = cfg.ensemble_rule();
    let mut predictions = Vec::new();
    let ensemble_report = if opts.ensemble {
        let ft = finetuned.as_ref().expect("checked above");
        for ex in gold {
            let llm = llm_labels.get(&ex.id).copied().flatten();
            let label = match (llm, ft.get(&ex.id).copied()) {
                (Some(l), Some(f)) => Some(rule.decide(l, f)),
                (None, Some(f)) => Some(f),
                (Some(l), None) => Some(l),
                (None, None) => None,
            };
            if let Some(label) = label {
                predictions.push(HeaderPrediction::new(ex.id.clone(), label, PredictionSource::Ensemble));
            }
        }
        Some(score(&predictions, 0)?)
    } else {
        None
    };

    Ok(ClassifyReport {
        total: gold.len(),
        override_labels: rule.override_labels.iter().copied().collect(),
        llm: llm_report,
        finetuned: finetuned_report,
        ensemble: ensemble_report,
        unparseable,
        failed,
        ignored_finetuned,
        prompt_hashes,
        predictions,
    })
}
