//! ROUGE, extractive fragment statistics, length statistics and corpus
//! reports.
//!
//! Tokenization is plain: lowercase, split on any run of non-alphanumeric
//! characters. No stemming or stopword removal is applied, so absolute ROUGE
//! values can differ slightly from toolkits that stem.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::ExampleSet;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricError {
    #[error("summary has no tokens")]
    EmptySummary,
    #[error("article has no tokens")]
    EmptyArticle,
    #[error("no pairs to summarize")]
    EmptySet,
    #[error("ROUGE-N is defined here for n in {{1, 2}}, got {0}")]
    UnsupportedN(usize),
    #[error("histogram bucket width must be positive")]
    InvalidBucketWidth,
    #[error("generation for unknown example `{0}`")]
    UnknownId(String),
}

/// Lowercase word tokens.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenSequence(Vec<String>);

impl TokenSequence {
    pub fn from_tokens<S: Into<String>>(tokens: impl IntoIterator<Item = S>) -> Self {
        Self(tokens.into_iter().map(Into::into).filter(|t: &String| !t.is_empty()).collect())
    }

    pub fn tokens(&self) -> &[String] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

pub fn tokenize(text: &str) -> TokenSequence {
    TokenSequence(
        text.split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty())
            .map(str::to_lowercase)
            .collect(),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RougeVariant {
    R1,
    R2,
    RL,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RougeScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub variant: RougeVariant,
}

impl RougeScore {
    fn from_counts(matched: usize, candidate_total: usize, reference_total: usize, variant: RougeVariant) -> Self {
        if candidate_total == 0 || reference_total == 0 {
            return Self { precision: 0.0, recall: 0.0, f1: 0.0, variant };
        }
        let precision = matched as f64 / candidate_total as f64;
        let recall = matched as f64 / reference_total as f64;
        Self { precision, recall, f1: harmonic_mean(precision, recall), variant }
    }

    fn perfect(variant: RougeVariant) -> Self {
        Self { precision: 1.0, recall: 1.0, f1: 1.0, variant }
    }
}

fn harmonic_mean(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped n-gram overlap for `n` in {1, 2}.
///
/// If either side has no n-grams every score is 0, except that two
/// identical token sequences (both too short to hold an n-gram) score 1.
pub fn rouge_n(candidate: &TokenSequence, reference: &TokenSequence, n: usize) -> Result<RougeScore, MetricError> {
    let variant = match n {
        1 => RougeVariant::R1,
        2 => RougeVariant::R2,
        other => return Err(MetricError::UnsupportedN(other)),
    };
    let cand = ngram_counts(&candidate.0, n);
    let refs = ngram_counts(&reference.0, n);
    let cand_total: usize = cand.values().sum();
    let ref_total: usize = refs.values().sum();
    if cand_total == 0 && ref_total == 0 && candidate == reference {
        return Ok(RougeScore::perfect(variant));
    }
    let matched = cand
        .iter()
        .map(|(g, c)| refs.get(g).map_or(0, |r| (*c).min(*r)))
        .sum();
    Ok(RougeScore::from_counts(matched, cand_total, ref_total, variant))
}

/// Length of the longest common subsequence.
pub fn lcs_len(a: &[String], b: &[String]) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS-based ROUGE-L (sentence level). Empty conventions as [`rouge_n`].
pub fn rouge_l(candidate: &TokenSequence, reference: &TokenSequence) -> RougeScore {
    if candidate.is_empty() && reference.is_empty() {
        return RougeScore::perfect(RougeVariant::RL);
    }
    let l = lcs_len(&candidate.0, &reference.0);
    RougeScore::from_counts(l, candidate.len(), reference.len(), RougeVariant::RL)
}

/// A maximal run of summary tokens copied from the article.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fragment {
    pub article_start: usize,
    pub summary_start: usize,
    pub length: usize,
}

/// Greedy left-to-right fragment extraction.
///
/// At each summary position the longest article match starting there is
/// taken (earliest article position on ties) and the cursor advances past
/// it; positions with no match advance by one.
pub fn extractive_fragments(article: &TokenSequence, summary: &TokenSequence) -> Vec<Fragment> {
    let (a, s) = (&article.0, &summary.0);
    let mut fragments = Vec::new();
    let mut i = 0;
    while i < s.len() {
        let mut best: Option<(usize, usize)> = None;
        for j in 0..a.len() {
            if a[j] != s[i] {
                continue;
            }
            let len = a[j..].iter().zip(&s[i..]).take_while(|(x, y)| x == y).count();
            if best.is_none_or(|(_, l)| len > l) {
                best = Some((j, len));
            }
        }
        match best {
            Some((article_start, length)) => {
                fragments.push(Fragment { article_start, summary_start: i, length });
                i += length;
            }
            None => i += 1,
        }
    }
    fragments
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExtractivenessScores {
    pub coverage: f64,
    pub density: f64,
    pub compression: f64,
}

/// Coverage `Σ|f| / |S|`, density `Σ|f|² / |S|` and compression `|A| / |S|`.
pub fn extractiveness(article: &TokenSequence, summary: &TokenSequence) -> Result<ExtractivenessScores, MetricError> {
    if summary.is_empty() {
        return Err(MetricError::EmptySummary);
    }
    if article.is_empty() {
        return Err(MetricError::EmptyArticle);
    }
    let frags = extractive_fragments(article, summary);
    let n = summary.len() as f64;
    let covered: usize = frags.iter().map(|f| f.length).sum();
    let squared: usize = frags.iter().map(|f| f.length * f.length).sum();
    Ok(ExtractivenessScores {
        coverage: covered as f64 / n,
        density: squared as f64 / n,
        compression: article.len() as f64 / n,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramBucket {
    /// Inclusive lower bound.
    pub lower: i64,
    /// Exclusive upper bound.
    pub upper: i64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthDiffStats {
    pub differences: Vec<i64>,
    pub mean: f64,
    pub median: f64,
    pub min: i64,
    pub max: i64,
    pub bucket_width: i64,
    pub histogram: Vec<HistogramBucket>,
}

pub const DEFAULT_BUCKET_WIDTH: i64 = 50;

/// Statistics of `source_len − summary_len` over a set of pairs, with a
/// contiguous fixed-width histogram spanning min to max.
pub fn length_diff_stats(pairs: &[(usize, usize)], bucket_width: i64) -> Result<LengthDiffStats, MetricError> {
    if pairs.is_empty() {
        return Err(MetricError::EmptySet);
    }
    if bucket_width <= 0 {
        return Err(MetricError::InvalidBucketWidth);
    }
    let differences: Vec<i64> = pairs.iter().map(|(d, s)| *d as i64 - *s as i64).collect();
    let n = differences.len();
    let mean = differences.iter().sum::<i64>() as f64 / n as f64;
    let mut sorted = differences.clone();
    sorted.sort_unstable();
    let median = if n % 2 == 1 {
        sorted[n / 2] as f64
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) as f64 / 2.0
    };
    let (min, max) = (sorted[0], sorted[n - 1]);
    let first = min.div_euclid(bucket_width);
    let last = max.div_euclid(bucket_width);
    let mut histogram: Vec<HistogramBucket> = (first..=last)
        .map(|b| HistogramBucket { lower: b * bucket_width, upper: (b + 1) * bucket_width, count: 0 })
        .collect();
    for d in &differences {
        histogram[(d.div_euclid(bucket_width) - first) as usize].count += 1;
    }
    Ok(LengthDiffStats { differences, mean, median, min, max, bucket_width, histogram })
}

/// Scores computed externally (BERTScore, BLEURT) and merged into a report.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExternalScores {
    pub bertscore_precision: Option<f64>,
    pub bertscore_recall: Option<f64>,
    pub bertscore_f1: Option<f64>,
    pub bleurt: Option<f64>,
}

/// Read per-example external scores from a CSV with an `id` column and any
/// of `bertscore_precision`, `bertscore_recall`, `bertscore_f1`, `bleurt`.
/// Empty cells mean "not scored".
pub fn read_external_scores(reader: impl std::io::Read) -> Result<BTreeMap<String, ExternalScores>, String> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr.headers().map_err(|e| e.to_string())?.clone();
    let col = |name: &str| headers.iter().position(|h| h.trim() == name);
    let id_col = col("id").ok_or("external scores need an `id` column")?;
    let cols = ["bertscore_precision", "bertscore_recall", "bertscore_f1", "bleurt"].map(col);
    let mut out = BTreeMap::new();
    for record in rdr.records() {
        let record = record.map_err(|e| e.to_string())?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let mut values = [None; 4];
        for (slot, c) in values.iter_mut().zip(cols) {
            let cell = c.and_then(|c| record.get(c)).unwrap_or("").trim();
            if !cell.is_empty() {
                *slot = Some(cell.parse::<f64>().map_err(|_| format!("line {line}: `{cell}` is not a number"))?);
            }
        }
        let [bertscore_precision, bertscore_recall, bertscore_f1, bleurt] = values;
        let id = record.get(id_col).unwrap_or("").trim().to_string();
        out.insert(id, ExternalScores { bertscore_precision, bertscore_recall, bertscore_f1, bleurt });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleMetrics {
    pub id: String,
    pub rouge1: RougeScore,
    pub rouge2: RougeScore,
    pub rouge_l: RougeScore,
    pub generated: Option<ExtractivenessScores>,
    pub reference: Option<ExtractivenessScores>,
    pub dialogue_tokens: usize,
    pub reference_tokens: usize,
    pub generated_tokens: usize,
    pub external: ExternalScores,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PrfMean {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ExtractivenessMean {
    pub coverage: f64,
    pub density: f64,
    pub compression: f64,
    /// Examples contributing to the means.
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MacroAverages {
    pub rouge1: PrfMean,
    pub rouge2: PrfMean,
    pub rouge_l: PrfMean,
    pub generated_extractiveness: ExtractivenessMean,
    pub reference_extractiveness: ExtractivenessMean,
    pub mean_dialogue_tokens: f64,
    pub mean_reference_tokens: f64,
    pub mean_generated_tokens: f64,
    pub external: ExternalScores,
}

/// Per-example and macro-averaged evaluation of a set of generations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// Always `"macro"`: corpus figures are means of per-example scores.
    pub aggregation: String,
    pub evaluated: usize,
    pub missing: Vec<String>,
    pub macro_avg: MacroAverages,
    /// Reference length minus generated length, per example.
    pub reference_minus_generated: Option<LengthDiffStats>,
    /// Dialogue length minus reference length, per example.
    pub dialogue_minus_reference: Option<LengthDiffStats>,
    pub per_example: Vec<ExampleMetrics>,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

fn prf_mean<'a>(scores: impl Iterator<Item = &'a RougeScore> + Clone) -> PrfMean {
    PrfMean {
        precision: mean(scores.clone().map(|s| s.precision)),
        recall: mean(scores.clone().map(|s| s.recall)),
        f1: mean(scores.map(|s| s.f1)),
    }
}

fn extractiveness_mean<'a>(scores: impl Iterator<Item = &'a ExtractivenessScores> + Clone) -> ExtractivenessMean {
    ExtractivenessMean {
        coverage: mean(scores.clone().map(|s| s.coverage)),
        density: mean(scores.clone().map(|s| s.density)),
        compression: mean(scores.clone().map(|s| s.compression)),
        count: scores.count(),
    }
}

fn optional_mean(xs: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let vals: Vec<f64> = xs.flatten().collect();
    (!vals.is_empty()).then(|| mean(vals.into_iter()))
}

/// Evaluate `generated` (id → text) against the references in `examples`.
///
/// Examples whose generation is absent or has no tokens are listed in
/// `missing` and excluded from every average. Generations for ids not in
/// `examples` are rejected.
pub fn corpus_report(examples: &ExampleSet, generated: &BTreeMap<String, String>) -> Result<MetricReport, MetricError> {
    corpus_report_with_external(examples, generated, &BTreeMap::new())
}

pub fn corpus_report_with_external(
    examples: &ExampleSet,
    generated: &BTreeMap<String, String>,
    external: &BTreeMap<String, ExternalScores>,
) -> Result<MetricReport, MetricError> {
    if let Some(id) = generated.keys().find(|id| examples.get(id).is_none()) {
        return Err(MetricError::UnknownId(id.clone()));
    }
    let mut per_example = Vec::new();
    let mut missing = Vec::new();
    for ex in examples {
        let gen_tokens = generated.get(&ex.id).map(|t| tokenize(t)).unwrap_or_default();
        if gen_tokens.is_empty() {
            missing.push(ex.id.clone());
            continue;
        }
        let dialogue = tokenize(&ex.dialogue);
        let reference = tokenize(&ex.summary);
        per_example.push(ExampleMetrics {
            id: ex.id.clone(),
            rouge1: rouge_n(&gen_tokens, &reference, 1)?,
            rouge2: rouge_n(&gen_tokens, &reference, 2)?,
            rouge_l: rouge_l(&gen_tokens, &reference),
            generated: extractiveness(&dialogue, &gen_tokens).ok(),
            reference: extractiveness(&dialogue, &reference).ok(),
            dialogue_tokens: dialogue.len(),
            reference_tokens: reference.len(),
            generated_tokens: gen_tokens.len(),
            external: external.get(&ex.id).cloned().unwrap_or_default(),
        });
    }
    let macro_avg = MacroAverages {
        rouge1: prf_mean(per_example.iter().map(|e| &e.rouge1)),
        rouge2: prf_mean(per_example.iter().map(|e| &e.rouge2)),
        rouge_l: prf_mean(per_example.iter().map(|e| &e.rouge_l)),
        generated_extractiveness: extractiveness_mean(per_example.iter().filter_map(|e| e.generated.as_ref())),
        reference_extractiveness: extractiveness_mean(per_example.iter().filter_map(|e| e.reference.as_ref())),
        mean_dialogue_tokens: mean(per_example.iter().map(|e| e.dialogue_tokens as f64)),
        mean_reference_tokens: mean(per_example.iter().map(|e| e.reference_tokens as f64)),
        mean_generated_tokens: mean(per_example.iter().map(|e| e.generated_tokens as f64)),
        external: ExternalScores {
            bertscore_precision: optional_mean(per_example.iter().map(|e| e.external.bertscore_precision)),
            bertscore_recall: optional_mean(per_example.iter().map(|e| e.external.bertscore_recall)),
            bertscore_f1: optional_mean(per_example.iter().map(|e| e.external.bertscore_f1)),
            bleurt: optional_mean(per_example.iter().map(|e| e.external.bleurt)),
        },
    };
    let ref_gen: Vec<(usize, usize)> = per_example.iter().map(|e| (e.reference_tokens, e.generated_tokens)).collect();
    let dia_ref: Vec<(usize, usize)> = per_example.iter().map(|e| (e.dialogue_tokens, e.reference_tokens)).collect();
    Ok(MetricReport {
        aggregation: "macro".into(),
        evaluated: per_example.len(),
        missing,
        macro_avg,
        reference_minus_generated: length_diff_stats(&ref_gen, DEFAULT_BUCKET_WIDTH).ok(),
        dialogue_minus_reference: length_diff_stats(&dia_ref, DEFAULT_BUCKET_WIDTH).ok(),
        per_example,
    })
}

impl MetricReport {
    /// Stable, pretty JSON (struct field order, sorted maps).
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// One CSV row per evaluated example.
    pub fn write_csv(&self, writer: impl std::io::Write) -> csv::Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record([
            "id", "r1_p", "r1_r", "r1_f1", "r2_p", "r2_r", "r2_f1", "rl_p", "rl_r", "rl_f1",
            "gen_coverage", "gen_density", "gen_compression", "ref_coverage", "ref_density", "ref_compression",
            "dialogue_tokens", "reference_tokens", "generated_tokens",
        ])?;
        let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
        for e in &self.per_example {
            wtr.write_record([
                e.id.clone(),
                e.rouge1.precision.to_string(),
                e.rouge1.recall.to_string(),
                e.rouge1.f1.to_string(),
                e.rouge2.precision.to_string(),
                e.rouge2.recall.to_string(),
                e.rouge2.f1.to_string(),
                e.rouge_l.precision.to_string(),
                e.rouge_l.recall.to_string(),
                e.rouge_l.f1.to_string(),
                opt(e.generated.map(|g| g.coverage)),
                opt(e.generated.map(|g| g.density)),
                opt(e.generated.map(|g| g.compression)),
                opt(e.reference.map(|g| g.coverage)),
                opt(e.reference.map(|g| g.density)),
                opt(e.reference.map(|g| g.compression)),
                e.dialogue_tokens.to_string(),
                e.reference_tokens.to_string(),
                e.generated_tokens.to_string(),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }

    /// Headline numbers as aligned text.
    pub fn summary_table(&self) -> String {
        let m = &self.macro_avg;
        let rows = [
            ("ROUGE-1 F1", m.rouge1.f1),
            ("ROUGE-2 F1", m.rouge2.f1),
            ("ROUGE-L F1", m.rouge_l.f1),
            ("EFC (generated)", m.generated_extractiveness.coverage),
            ("EFD (generated)", m.generated_extractiveness.density),
            ("CR (generated)", m.generated_extractiveness.compression),
            ("EFC (reference)", m.reference_extractiveness.coverage),
            ("EFD (reference)", m.reference_extractiveness.density),
            ("CR (reference)", m.reference_extractiveness.compression),
        ];
        let mut out = format!("evaluated: {}  missing: {}\n", self.evaluated, self.missing.len());
        for (name, v) in rows {
            out.push_str(&format!("{name:<18} {v:>8.4}\n"));
        }
        out
    }
}
