//! Dataset loading, validation and splitting.
//!
//! Task A files hold one (dialogue, section summary, section header) triple
//! per row; task B files hold one full encounter and its complete note.
//! Column names are configurable through [`ColumnMapping`]; the defaults
//! match the public MTS-Dialog and ACI-Bench CSV releases.

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("column `{0}` not found in header row")]
    MissingColumn(String),
    #[error("invalid section header(s): {}", format_invalid(.0))]
    InvalidHeader(Vec<InvalidHeaderRow>),
    #[error("empty dialogue at line {line} (id `{id}`)")]
    EmptyDialogue { line: u64, id: String },
    #[error("duplicate example id `{id}` at line {line}")]
    DuplicateId { line: u64, id: String },
    #[error("example set is empty")]
    EmptySet,
    #[error("train fraction must lie strictly between 0 and 1, got {0}")]
    InvalidFraction(f64),
    #[error("task A schema requires a header column")]
    HeaderColumnRequired,
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One row whose header label failed to parse.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InvalidHeaderRow {
    pub line: u64,
    pub value: String,
}

fn format_invalid(rows: &[InvalidHeaderRow]) -> String {
    rows.iter()
        .map(|r| format!("line {}: `{}`", r.line, r.value))
        .collect::<Vec<_>>()
        .join(", ")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnknownHeader(pub String);

impl fmt::Display for UnknownHeader {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "unknown section header `{}`", self.0)
    }
}

impl std::error::Error for UnknownHeader {}

/// The 20 section-header labels of the section-level task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SectionHeader {
    FamSochx,
    Genhx,
    PastMedicalHx,
    Cc,
    PastSurgical,
    Allergy,
    Gynhx,
    OtherHistory,
    Immunizations,
    Medications,
    Ros,
    Exam,
    Imaging,
    Procedures,
    Labs,
    Assessment,
    Diagnosis,
    Plan,
    EdCourse,
    Disposition,
}

impl SectionHeader {
    pub const ALL: [SectionHeader; 20] = [
        SectionHeader::FamSochx,
        SectionHeader::Genhx,
        SectionHeader::PastMedicalHx,
        SectionHeader::Cc,
        SectionHeader::PastSurgical,
        SectionHeader::Allergy,
        SectionHeader::Gynhx,
        SectionHeader::OtherHistory,
        SectionHeader::Immunizations,
        SectionHeader::Medications,
        SectionHeader::Ros,
        SectionHeader::Exam,
        SectionHeader::Imaging,
        SectionHeader::Procedures,
        SectionHeader::Labs,
        SectionHeader::Assessment,
        SectionHeader::Diagnosis,
        SectionHeader::Plan,
        SectionHeader::EdCourse,
        SectionHeader::Disposition,
    ];

    /// Canonical dataset spelling.
    pub fn as_str(self) -> &'static str {
        match self {
            SectionHeader::FamSochx => "FAM/SOCHX",
            SectionHeader::Genhx => "GENHX",
            SectionHeader::PastMedicalHx => "PASTMEDICALHX",
            SectionHeader::Cc => "CC",
            SectionHeader::PastSurgical => "PASTSURGICAL",
            SectionHeader::Allergy => "ALLERGY",
            SectionHeader::Gynhx => "GYNHX",
            SectionHeader::OtherHistory => "OTHER_HISTORY",
            SectionHeader::Immunizations => "IMMUNIZATIONS",
            SectionHeader::Medications => "MEDICATIONS",
            SectionHeader::Ros => "ROS",
            SectionHeader::Exam => "EXAM",
            SectionHeader::Imaging => "IMAGING",
            SectionHeader::Procedures => "PROCEDURES",
            SectionHeader::Labs => "LABS",
            SectionHeader::Assessment => "ASSESSMENT",
            SectionHeader::Diagnosis => "DIAGNOSIS",
            SectionHeader::Plan => "PLAN",
            SectionHeader::EdCourse => "EDCOURSE",
            SectionHeader::Disposition => "DISPOSITION",
        }
    }

    /// Index into [`SectionHeader::ALL`].
    pub fn index(self) -> usize {
        self as usize
    }

    /// Case-, whitespace- and punctuation-insensitive lookup
    /// (`"fam/sochx"`, `"FAMSOCHX"` and `" Fam-Sochx "` are all accepted).
    pub fn parse(s: &str) -> Result<Self, UnknownHeader> {
        let key = normalize_label(s);
        if key.is_empty() {
            return Err(UnknownHeader(s.to_string()));
        }
        Self::ALL
            .iter()
            .copied()
            .find(|h| normalize_label(h.as_str()) == key)
            .ok_or_else(|| UnknownHeader(s.to_string()))
    }

    /// Major note sections this header is grouped under.
    pub fn major_sections(self) -> &'static [MajorSection] {
        use MajorSection::*;
        match self {
            SectionHeader::FamSochx
            | SectionHeader::Genhx
            | SectionHeader::PastMedicalHx
            | SectionHeader::Cc
            | SectionHeader::PastSurgical
            | SectionHeader::Allergy
            | SectionHeader::Gynhx
            | SectionHeader::OtherHistory
            | SectionHeader::Immunizations => &[HistoryOfPresentIllness],
            SectionHeader::Medications => &[HistoryOfPresentIllness, AssessmentAndPlan],
            SectionHeader::Ros | SectionHeader::Exam => &[PhysicalExam],
            SectionHeader::Imaging | SectionHeader::Procedures | SectionHeader::Labs => &[Results],
            SectionHeader::Assessment
            | SectionHeader::Diagnosis
            | SectionHeader::Plan
            | SectionHeader::EdCourse
            | SectionHeader::Disposition => &[AssessmentAndPlan],
        }
    }
}

/// Uppercase and drop everything that is not ASCII alphanumeric.
pub(crate) fn normalize_label(s: &str) -> String {
    s.chars()
        .filter(|c| c.is_ascii_alphanumeric())
        .map(|c| c.to_ascii_uppercase())
        .collect()
}

impl fmt::Display for SectionHeader {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SectionHeader {
    type Err = UnknownHeader;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::parse(s)
    }
}

impl Serialize for SectionHeader {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for SectionHeader {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        SectionHeader::parse(&s).map_err(serde::de::Error::custom)
    }
}

/// Top-level divisions of a clinical note.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum MajorSection {
    HistoryOfPresentIllness,
    PhysicalExam,
    Results,
    AssessmentAndPlan,
}

impl MajorSection {
    pub const ALL: [MajorSection; 4] = [
        MajorSection::HistoryOfPresentIllness,
        MajorSection::PhysicalExam,
        MajorSection::Results,
        MajorSection::AssessmentAndPlan,
    ];

    /// Identifier form, e.g. `PHYSICAL_EXAM`.
    pub fn as_str(self) -> &'static str {
        match self {
            MajorSection::HistoryOfPresentIllness => "HISTORY_OF_PRESENT_ILLNESS",
            MajorSection::PhysicalExam => "PHYSICAL_EXAM",
            MajorSection::Results => "RESULTS",
            MajorSection::AssessmentAndPlan => "ASSESSMENT_AND_PLAN",
        }
    }

    /// Heading as it appears in a note, e.g. `PHYSICAL EXAM`.
    pub fn title(self) -> &'static str {
        match self {
            MajorSection::HistoryOfPresentIllness => "HISTORY OF PRESENT ILLNESS",
            MajorSection::PhysicalExam => "PHYSICAL EXAM",
            MajorSection::Results => "RESULTS",
            MajorSection::AssessmentAndPlan => "ASSESSMENT AND PLAN",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        let key = normalize_label(s);
        Self::ALL
            .iter()
            .copied()
            .find(|m| normalize_label(m.as_str()) == key)
    }
}

impl fmt::Display for MajorSection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Grouping of a section header into major note sections.
pub fn major_sections_of(header: SectionHeader) -> BTreeSet<MajorSection> {
    header.major_sections().iter().copied().collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Task {
    /// Section-level summaries with a header label per dialogue.
    #[serde(alias = "a")]
    A,
    /// Full-note summaries.
    #[serde(alias = "b")]
    B,
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Task::A => f.write_str("A"),
            Task::B => f.write_str("B"),
        }
    }
}

impl FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "a" | "A" => Ok(Task::A),
            "b" | "B" => Ok(Task::B),
            other => Err(format!("unknown task `{other}` (expected a or b)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub id: String,
    pub dialogue: String,
    pub summary: String,
    pub header: Option<SectionHeader>,
    pub task: Task,
}

/// An ordered, id-unique collection of examples of one task.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExampleSet {
    task: Task,
    examples: Vec<Example>,
}

impl ExampleSet {
    /// Build a set, checking id uniqueness, non-empty dialogues and the
    /// header/task agreement.
    pub fn new(task: Task, examples: Vec<Example>) -> Result<Self, CorpusError> {
        let mut seen = HashSet::new();
        for (i, ex) in examples.iter().enumerate() {
            let line = i as u64 + 1;
            if !seen.insert(ex.id.as_str()) {
                return Err(CorpusError::DuplicateId { line, id: ex.id.clone() });
            }
            if ex.dialogue.trim().is_empty() {
                return Err(CorpusError::EmptyDialogue { line, id: ex.id.clone() });
            }
        }
        let examples = examples
            .into_iter()
            .map(|mut ex| {
                ex.task = task;
                if task == Task::B {
                    ex.header = None;
                }
                ex
            })
            .collect::<Vec<_>>();
        if task == Task::A {
            if let Some((i, ex)) = examples.iter().enumerate().find(|(_, e)| e.header.is_none()) {
                return Err(CorpusError::InvalidHeader(vec![InvalidHeaderRow {
                    line: i as u64 + 1,
                    value: format!("<missing for `{}`>", ex.id),
                }]));
            }
        }
        Ok(Self { task, examples })
    }

    pub fn task(&self) -> Task {
        self.task
    }

    pub fn examples(&self) -> &[Example] {
        &self.examples
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Example> {
        self.examples.iter().find(|e| e.id == id)
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Example> {
        self.examples.iter()
    }

    /// A new set holding only the examples at `indices`, in the given order.
    fn subset(&self, indices: &[usize]) -> ExampleSet {
        ExampleSet {
            task: self.task,
            examples: indices.iter().map(|&i| self.examples[i].clone()).collect(),
        }
    }
}

impl<'a> IntoIterator for &'a ExampleSet {
    type Item = &'a Example;
    type IntoIter = std::slice::Iter<'a, Example>;

    fn into_iter(self) -> Self::IntoIter {
        self.examples.iter()
    }
}

/// Maps dataset column names onto example fields.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnMapping {
    pub id: String,
    pub dialogue: String,
    /// Absent for generate-only inputs without references.
    pub summary: Option<String>,
    pub header: Option<String>,
}

impl ColumnMapping {
    /// MTS-Dialog layout: `ID,section_header,section_text,dialogue`.
    pub fn mts_dialog() -> Self {
        Self {
            id: "ID".into(),
            dialogue: "dialogue".into(),
            summary: Some("section_text".into()),
            header: Some("section_header".into()),
        }
    }

    /// ACI-Bench layout: `encounter_id,dialogue,note`.
    pub fn aci_bench() -> Self {
        Self {
            id: "encounter_id".into(),
            dialogue: "dialogue".into(),
            summary: Some("note".into()),
            header: None,
        }
    }

    pub fn default_for(task: Task) -> Self {
        match task {
            Task::A => Self::mts_dialog(),
            Task::B => Self::aci_bench(),
        }
    }
}

fn column_index(headers: &csv::StringRecord, name: &str) -> Result<usize, CorpusError> {
    headers
        .iter()
        .position(|h| h.trim() == name)
        .ok_or_else(|| CorpusError::MissingColumn(name.to_string()))
}

/// Load a CSV file with a header row.
///
/// Every row with an unparseable header label is collected and reported in a
/// single [`CorpusError::InvalidHeader`]; line numbers are 1-based file lines.
pub fn load_examples(
    path: impl AsRef<Path>,
    schema: &ColumnMapping,
    task: Task,
) -> Result<ExampleSet, CorpusError> {
    let file = std::fs::File::open(path)?;
    read_examples(file, schema, task)
}

/// [`load_examples`] over any reader.
pub fn read_examples(
    reader: impl std::io::Read,
    schema: &ColumnMapping,
    task: Task,
) -> Result<ExampleSet, CorpusError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let id_col = column_index(&headers, &schema.id)?;
    let dialogue_col = column_index(&headers, &schema.dialogue)?;
    let summary_col = schema
        .summary
        .as_deref()
        .map(|c| column_index(&headers, c))
        .transpose()?;
    let header_col = match (task, schema.header.as_deref()) {
        (Task::A, Some(c)) => Some(column_index(&headers, c)?),
        (Task::A, None) => return Err(CorpusError::HeaderColumnRequired),
        (Task::B, _) => None,
    };

    let mut examples = Vec::new();
    let mut invalid = Vec::new();
    let mut seen = HashSet::new();
    for record in rdr.records() {
        let record = record?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let field = |i: usize| record.get(i).unwrap_or("").to_string();
        let id = field(id_col).trim().to_string();
        let dialogue = field(dialogue_col);
        if dialogue.trim().is_empty() {
            return Err(CorpusError::EmptyDialogue { line, id });
        }
        if !seen.insert(id.clone()) {
            return Err(CorpusError::DuplicateId { line, id });
        }
        let header = match header_col {
            Some(c) => {
                let raw = field(c);
                match SectionHeader::parse(&raw) {
                    Ok(h) => Some(h),
                    Err(_) => {
                        invalid.push(InvalidHeaderRow { line, value: raw });
                        None
                    }
                }
            }
            None => None,
        };
        examples.push(Example {
            id,
            dialogue,
            summary: summary_col.map(field).unwrap_or_default(),
            header,
            task,
        });
    }
    if !invalid.is_empty() {
        return Err(CorpusError::InvalidHeader(invalid));
    }
    ExampleSet::new(task, examples)
}

/// Write a set in the layout described by `schema` (columns: id, dialogue,
/// summary, header). Reading the output back with the same schema yields an
/// identical set.
pub fn write_examples(
    set: &ExampleSet,
    writer: impl std::io::Write,
    schema: &ColumnMapping,
) -> Result<(), CorpusError> {
    let mut wtr = csv::Writer::from_writer(writer);
    let mut cols = vec![schema.id.as_str(), schema.dialogue.as_str()];
    if let Some(s) = &schema.summary {
        cols.push(s);
    }
    let with_header = set.task() == Task::A && schema.header.is_some();
    if let (true, Some(h)) = (with_header, &schema.header) {
        cols.push(h);
    }
    wtr.write_record(&cols)?;
    for ex in set {
        let mut row = vec![ex.id.as_str(), ex.dialogue.as_str()];
        if schema.summary.is_some() {
            row.push(&ex.summary);
        }
        if with_header {
            row.push(ex.header.map(|h| h.as_str()).unwrap_or(""));
        }
        wtr.write_record(&row)?;
    }
    wtr.flush()?;
    Ok(())
}

/// Seeded train/validation partition.
///
/// Row indices are shuffled with Fisher–Yates driven by `ChaCha8Rng`
/// seeded via `seed_from_u64(seed)`; the first `floor(fraction · n)`
/// shuffled indices form the training part. Both parts keep the original
/// file order.
pub fn split_train_validation(
    set: &ExampleSet,
    train_fraction: f64,
    seed: u64,
) -> Result<(ExampleSet, ExampleSet), CorpusError> {
    if set.is_empty() {
        return Err(CorpusError::EmptySet);
    }
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(CorpusError::InvalidFraction(train_fraction));
    }
    let n = set.len();
    // guards against 0.29 * 100 = 28.999999999999996
    let n_train = ((train_fraction * n as f64) + 1e-9).floor() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let (train, valid) = order.split_at(n_train);
    let mut train = train.to_vec();
    let mut valid = valid.to_vec();
    train.sort_unstable();
    valid.sort_unstable();
    Ok((set.subset(&train), set.subset(&valid)))
}
