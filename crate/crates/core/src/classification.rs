//! Section-header prediction: LLM label parsing, fine-tuned prediction
//! ingestion, the override ensemble and accuracy reporting.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{normalize_label, ExampleSet, SectionHeader};

#[derive(Debug, Error)]
pub enum ClassificationError {
    #[error("no section header found in completion `{0}`")]
    UnparseableLabel(String),
    #[error("predictions refer to different examples (`{llm}` vs `{finetuned}`)")]
    IdMismatch { llm: String, finetuned: String },
    #[error("invalid section header `{value}` at line {line}")]
    InvalidHeader { line: u64, value: String },
    #[error("duplicate example id `{id}` at line {line}")]
    DuplicateId { line: u64, id: String },
    #[error("prediction for unknown or unlabelled example `{0}`")]
    UnknownId(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum PredictionSource {
    Llm,
    Finetuned,
    Ensemble,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeaderPrediction {
    pub example_id: String,
    pub label: SectionHeader,
    pub source: PredictionSource,
}

impl HeaderPrediction {
    pub fn new(example_id: impl Into<String>, label: SectionHeader, source: PredictionSource) -> Self {
        Self { example_id: example_id.into(), label, source }
    }
}

/// Labels for which the fine-tuned classifier's prediction wins.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnsembleRule {
    pub override_labels: BTreeSet<SectionHeader>,
}

impl Default for EnsembleRule {
    fn default() -> Self {
        Self {
            override_labels: BTreeSet::from([SectionHeader::Ros, SectionHeader::Genhx, SectionHeader::Cc]),
        }
    }
}

impl EnsembleRule {
    pub fn new(override_labels: impl IntoIterator<Item = SectionHeader>) -> Self {
        Self { override_labels: override_labels.into_iter().collect() }
    }

    pub fn decide(&self, llm: SectionHeader, finetuned: SectionHeader) -> SectionHeader {
        if self.override_labels.contains(&finetuned) {
            finetuned
        } else {
            llm
        }
    }
}

/// Extract a header label from free-form completion text.
///
/// The whole (normalized) string is tried first. Otherwise the text is split
/// into alphanumeric words and scanned left to right; at each word a
/// two-word window (`Fam/Sochx`, `other history`) is tried before the single
/// word.
pub fn parse_llm_label(completion_text: &str) -> Result<SectionHeader, ClassificationError> {
    if let Ok(h) = SectionHeader::parse(completion_text) {
        return Ok(h);
    }
    let words: Vec<String> = completion_text
        .split(|c: char| !c.is_ascii_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(normalize_label)
        .collect();
    for i in 0..words.len() {
        if let Some(next) = words.get(i + 1) {
            if let Ok(h) = SectionHeader::parse(&format!("{}{}", words[i], next)) {
                return Ok(h);
            }
        }
        if let Ok(h) = SectionHeader::parse(&words[i]) {
            return Ok(h);
        }
    }
    Err(ClassificationError::UnparseableLabel(completion_text.to_string()))
}

pub fn ensemble_predict(
    llm: &HeaderPrediction,
    finetuned: &HeaderPrediction,
    rule: &EnsembleRule,
) -> Result<SectionHeader, ClassificationError> {
    if llm.example_id != finetuned.example_id {
        return Err(ClassificationError::IdMismatch {
            llm: llm.example_id.clone(),
            finetuned: finetuned.example_id.clone(),
        });
    }
    Ok(rule.decide(llm.label, finetuned.label))
}

/// Read a two-column `(example_id, label)` CSV with a header row.
pub fn load_finetuned_predictions(path: impl AsRef<Path>) -> Result<Vec<HeaderPrediction>, ClassificationError> {
    read_predictions(std::fs::File::open(path)?, PredictionSource::Finetuned)
}

pub fn read_predictions(
    reader: impl std::io::Read,
    source: PredictionSource,
) -> Result<Vec<HeaderPrediction>, ClassificationError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for record in rdr.records() {
        let record = record?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let id = record.get(0).unwrap_or("").trim().to_string();
        let raw = record.get(1).unwrap_or("");
        let label = SectionHeader::parse(raw)
            .map_err(|_| ClassificationError::InvalidHeader { line, value: raw.to_string() })?;
        if !seen.insert(id.clone()) {
            return Err(ClassificationError::DuplicateId { line, id });
        }
        out.push(HeaderPrediction { example_id: id, label, source });
    }
    Ok(out)
}

pub fn write_predictions(predictions: &[HeaderPrediction], writer: impl std::io::Write) -> Result<(), ClassificationError> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(["example_id", "label"])?;
    for p in predictions {
        wtr.write_record([p.example_id.as_str(), p.label.as_str()])?;
    }
    wtr.flush()?;
    Ok(())
}

/// Counts indexed `[gold][predicted]` in [`SectionHeader::ALL`] order.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ConfusionMatrix {
    counts: [[u64; 20]; 20],
}

impl ConfusionMatrix {
    pub fn add(&mut self, gold: SectionHeader, predicted: SectionHeader) {
        self.counts[gold.index()][predicted.index()] += 1;
    }

    pub fn get(&self, gold: SectionHeader, predicted: SectionHeader) -> u64 {
        self.counts[gold.index()][predicted.index()]
    }

    pub fn row_total(&self, gold: SectionHeader) -> u64 {
        self.counts[gold.index()].iter().sum()
    }

    /// Non-zero cells as `gold → predicted → count`.
    pub fn to_map(&self) -> BTreeMap<String, BTreeMap<String, u64>> {
        let mut out = BTreeMap::new();
        for g in SectionHeader::ALL {
            let row: BTreeMap<String, u64> = SectionHeader::ALL
                .iter()
                .filter(|p| self.get(g, **p) > 0)
                .map(|p| (p.as_str().to_string(), self.get(g, *p)))
                .collect();
            if !row.is_empty() {
                out.insert(g.as_str().to_string(), row);
            }
        }
        out
    }
}

impl Serialize for ConfusionMatrix {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        self.to_map().serialize(serializer)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AccuracyReport {
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
    pub confusion: ConfusionMatrix,
}

/// Fraction of predictions matching the gold header, plus a confusion matrix.
pub fn accuracy(predictions: &[HeaderPrediction], gold: &ExampleSet) -> Result<AccuracyReport, ClassificationError> {
    let mut confusion = ConfusionMatrix::default();
    let mut correct = 0;
    for p in predictions {
        let g = gold
            .get(&p.example_id)
            .and_then(|e| e.header)
            .ok_or_else(|| ClassificationError::UnknownId(p.example_id.clone()))?;
        confusion.add(g, p.label);
        if g == p.label {
            correct += 1;
        }
    }
    let total = predictions.len();
    let accuracy = if total == 0 { 0.0 } else { correct as f64 / total as f64 };
    Ok(AccuracyReport { accuracy, correct, total, confusion })
}
