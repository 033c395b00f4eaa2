//! Prompt rendering for every summarization and classification strategy.
//!
//! Templates are plain UTF-8 text with `{name}` placeholders, one file per
//! strategy (see `templates/`). A single trailing newline is dropped when a
//! template is loaded so that files can be edited normally. Substituted
//! values are never rescanned for placeholders.
//!
//! The header-classification template is a reconstruction: the label list
//! plus a single-label answer instruction.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Example, MajorSection, SectionHeader};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PromptError {
    #[error("at least one in-context example is required")]
    NoExamples,
    #[error("expected exactly {expected} example(s), got {got}")]
    WrongExampleCount { expected: usize, got: usize },
    #[error("in-context example `{id}` is unusable: {reason}")]
    InvalidExample { id: String, reason: String },
    #[error("dialogue is empty")]
    EmptyDialogue,
    #[error("input is empty")]
    EmptyInput,
    #[error("stage must be 1 or 2, got {0}")]
    InvalidStage(u8),
    #[error("no template named `{0}`")]
    MissingTemplate(String),
    #[error("template `{template}` has unresolved placeholder `{{{placeholder}}}`")]
    UnresolvedPlaceholder { template: String, placeholder: String },
    #[error("reading template {path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Strategy {
    PromptSelectionA,
    PromptSelectionB,
    ZeroShotB,
    SectionFewshotA,
    PerspectiveShiftStage1,
    PerspectiveShiftStage2,
    TwoStage1,
    TwoStage2,
    HeaderClassify,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).ok();
        f.write_str(s.as_ref().and_then(|v| v.as_str()).unwrap_or("?"))
    }
}

/// Fully rendered prompt text plus provenance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prompt {
    pub text: String,
    pub strategy: Strategy,
    pub k: usize,
    pub example_ids: Vec<String>,
}

pub const EXAMPLE_BLOCK: &str = "prompt_selection_example";
pub const PROMPT_SELECTION_A: &str = "prompt_selection_a";
pub const PROMPT_SELECTION_B: &str = "prompt_selection_b";
pub const ZERO_SHOT_B: &str = "zero_shot_b";
pub const PERSPECTIVE_SHIFT_1: &str = "perspective_shift_1";
pub const PERSPECTIVE_SHIFT_2: &str = "perspective_shift_2";
pub const TWO_STAGE_1: &str = "two_stage_1";
pub const TWO_STAGE_2: &str = "two_stage_2";
pub const HEADER_CLASSIFY: &str = "header_classify";

/// Template name holding the static few-shot prompt of a major section.
pub fn section_template_name(section: MajorSection) -> String {
    format!("section_fewshot_{}", section.as_str().to_ascii_lowercase())
}

const BUILTIN: &[(&str, &str)] = &[
    (EXAMPLE_BLOCK, include_str!("../templates/prompt_selection_example.txt")),
    (PROMPT_SELECTION_A, include_str!("../templates/prompt_selection_a.txt")),
    (PROMPT_SELECTION_B, include_str!("../templates/prompt_selection_b.txt")),
    (ZERO_SHOT_B, include_str!("../templates/zero_shot_b.txt")),
    (PERSPECTIVE_SHIFT_1, include_str!("../templates/perspective_shift_1.txt")),
    (PERSPECTIVE_SHIFT_2, include_str!("../templates/perspective_shift_2.txt")),
    (TWO_STAGE_1, include_str!("../templates/two_stage_1.txt")),
    (TWO_STAGE_2, include_str!("../templates/two_stage_2.txt")),
    (HEADER_CLASSIFY, include_str!("../templates/header_classify.txt")),
    (
        "section_fewshot_history_of_present_illness",
        include_str!("../templates/section_fewshot_history_of_present_illness.txt"),
    ),
    ("section_fewshot_physical_exam", include_str!("../templates/section_fewshot_physical_exam.txt")),
    ("section_fewshot_results", include_str!("../templates/section_fewshot_results.txt")),
    (
        "section_fewshot_assessment_and_plan",
        include_str!("../templates/section_fewshot_assessment_and_plan.txt"),
    ),
];

fn strip_trailing_newline(s: &str) -> &str {
    s.strip_suffix("\r\n").or_else(|| s.strip_suffix('\n')).unwrap_or(s)
}

/// Named templates.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TemplateSet {
    templates: BTreeMap<String, String>,
}

impl TemplateSet {
    pub fn empty() -> Self {
        Self::default()
    }

    /// The templates compiled into the crate.
    pub fn builtin() -> Self {
        let mut set = Self::empty();
        for (name, body) in BUILTIN {
            set.insert(*name, body);
        }
        set
    }

    /// Built-in templates overridden by every `*.txt` file in `dir`
    /// (template name = file stem).
    pub fn with_overrides_from(dir: impl AsRef<Path>) -> Result<Self, PromptError> {
        let dir = dir.as_ref();
        let io_err = |e: std::io::Error| PromptError::Io { path: dir.display().to_string(), message: e.to_string() };
        let mut set = Self::builtin();
        let mut paths: Vec<_> = std::fs::read_dir(dir)
            .map_err(io_err)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "txt"))
            .collect();
        paths.sort();
        for path in paths {
            let body = std::fs::read_to_string(&path).map_err(io_err)?;
            let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
            set.insert(name, &body);
        }
        Ok(set)
    }

    pub fn insert(&mut self, name: impl Into<String>, body: &str) {
        self.templates.insert(name.into(), strip_trailing_newline(body).to_string());
    }

    pub fn get(&self, name: &str) -> Result<&str, PromptError> {
        self.templates
            .get(name)
            .map(String::as_str)
            .ok_or_else(|| PromptError::MissingTemplate(name.to_string()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.templates.keys().map(String::as_str)
    }

    /// Render a named template.
    pub fn render(&self, name: &str, values: &[(&str, &str)]) -> Result<String, PromptError> {
        render_template(name, self.get(name)?, values)
    }
}

fn is_placeholder_char(c: char) -> bool {
    c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_' || c == '-'
}

/// Single-pass `{name}` substitution. Braces that do not enclose a
/// placeholder-shaped name (lowercase, digits, `_`, `-`) are copied through.
pub fn render_template(name: &str, template: &str, values: &[(&str, &str)]) -> Result<String, PromptError> {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let key_len = after.find(|c: char| !is_placeholder_char(c)).unwrap_or(after.len());
        if key_len > 0 && after[key_len..].starts_with('}') {
            let key = &after[..key_len];
            let value = values
                .iter()
                .find(|(k, _)| *k == key)
                .map(|(_, v)| *v)
                .ok_or_else(|| PromptError::UnresolvedPlaceholder {
                    template: name.to_string(),
                    placeholder: key.to_string(),
                })?;
            out.push_str(value);
            rest = &after[key_len + 1..];
        } else {
            out.push('{');
            rest = after;
        }
    }
    out.push_str(rest);
    Ok(out)
}

fn non_empty(text: &str, err: PromptError) -> Result<&str, PromptError> {
    if text.trim().is_empty() {
        Err(err)
    } else {
        Ok(text)
    }
}

fn example_blocks(templates: &TemplateSet, examples: &[&Example]) -> Result<String, PromptError> {
    let blocks = examples
        .iter()
        .map(|ex| templates.render(EXAMPLE_BLOCK, &[("dialogue", &ex.dialogue), ("summary", &ex.summary)]))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(blocks.join("\n\n"))
}

/// Renders prompts from a [`TemplateSet`].
#[derive(Debug, Clone)]
pub struct PromptRenderer {
    templates: TemplateSet,
}

impl Default for PromptRenderer {
    fn default() -> Self {
        Self::new(TemplateSet::builtin())
    }
}

impl PromptRenderer {
    pub fn new(templates: TemplateSet) -> Self {
        Self { templates }
    }

    pub fn templates(&self) -> &TemplateSet {
        &self.templates
    }

    /// Retrieved section-level examples followed by the query, with a
    /// `Section:` line naming the target header above the query block.
    pub fn prompt_selection_a(
        &self,
        query_dialogue: &str,
        examples: &[&Example],
        header: SectionHeader,
    ) -> Result<Prompt, PromptError> {
        let query = non_empty(query_dialogue, PromptError::EmptyDialogue)?;
        if examples.is_empty() {
            return Err(PromptError::NoExamples);
        }
        for ex in examples {
            if ex.dialogue.trim().is_empty() {
                return Err(PromptError::InvalidExample { id: ex.id.clone(), reason: "empty dialogue".into() });
            }
        }
        let blocks = example_blocks(&self.templates, examples)?;
        let text = self.templates.render(
            PROMPT_SELECTION_A,
            &[("examples", &blocks), ("section_header", header.as_str()), ("dialogue", query)],
        )?;
        Ok(Prompt {
            text,
            strategy: Strategy::PromptSelectionA,
            k: examples.len(),
            example_ids: examples.iter().map(|e| e.id.clone()).collect(),
        })
    }

    /// One full-note exemplar followed by the query. The exemplar summary
    /// carries the note's section headings verbatim.
    pub fn prompt_selection_b(&self, query_dialogue: &str, examples: &[&Example]) -> Result<Prompt, PromptError> {
        if examples.len() != 1 {
            return Err(PromptError::WrongExampleCount { expected: 1, got: examples.len() });
        }
        self.prompt_selection_b_long(query_dialogue, examples)
    }

    /// Full-note prompt with any number of exemplars. Only used when the
    /// caller opted into long contexts.
    pub fn prompt_selection_b_long(&self, query_dialogue: &str, examples: &[&Example]) -> Result<Prompt, PromptError> {
        let query = non_empty(query_dialogue, PromptError::EmptyDialogue)?;
        if examples.is_empty() {
            return Err(PromptError::NoExamples);
        }
        for example in examples {
            if example.summary.trim().is_empty() {
                return Err(PromptError::InvalidExample { id: example.id.clone(), reason: "empty summary".into() });
            }
            if example.dialogue.trim().is_empty() {
                return Err(PromptError::InvalidExample { id: example.id.clone(), reason: "empty dialogue".into() });
            }
        }
        let blocks = example_blocks(&self.templates, examples)?;
        let text = self
            .templates
            .render(PROMPT_SELECTION_B, &[("examples", &blocks), ("dialogue", query)])?;
        Ok(Prompt {
            text,
            strategy: Strategy::PromptSelectionB,
            k: examples.len(),
            example_ids: examples.iter().map(|e| e.id.clone()).collect(),
        })
    }

    pub fn zero_shot_b(&self, dialogue: &str) -> Result<Prompt, PromptError> {
        let dialogue = non_empty(dialogue, PromptError::EmptyDialogue)?;
        let text = self.templates.render(ZERO_SHOT_B, &[("dialogue", dialogue)])?;
        Ok(Prompt { text, strategy: Strategy::ZeroShotB, k: 0, example_ids: vec![] })
    }

    /// Static few-shot prompt for `section` with the query appended. `k`
    /// counts the exemplar blocks in the template; their ids are
    /// `<SECTION>/<n>`.
    pub fn section_fewshot_a(&self, dialogue: &str, section: MajorSection) -> Result<Prompt, PromptError> {
        let dialogue = non_empty(dialogue, PromptError::EmptyDialogue)?;
        let name = section_template_name(section);
        let template = self.templates.get(&name)?;
        let blocks = template.lines().filter(|l| l.trim_start().starts_with("Dialogue")).count();
        let k = blocks.saturating_sub(1);
        let text = render_template(&name, template, &[("dialogue", dialogue)])?;
        Ok(Prompt {
            text,
            strategy: Strategy::SectionFewshotA,
            k,
            example_ids: (1..=k).map(|i| format!("{}/{i}", section.as_str())).collect(),
        })
    }

    /// Stage 1 rewrites the dialogue as a third-person narrative; stage 2
    /// summarizes that narrative into the four note sections.
    pub fn perspective_shift(&self, input: &str, stage: u8) -> Result<Prompt, PromptError> {
        let (name, strategy) = match stage {
            1 => (PERSPECTIVE_SHIFT_1, Strategy::PerspectiveShiftStage1),
            2 => (PERSPECTIVE_SHIFT_2, Strategy::PerspectiveShiftStage2),
            s => return Err(PromptError::InvalidStage(s)),
        };
        let input = non_empty(input, PromptError::EmptyInput)?;
        let text = self.templates.render(name, &[("dialogue", input)])?;
        Ok(Prompt { text, strategy, k: 0, example_ids: vec![] })
    }

    /// Stage 1 extracts salient points; stage 2 turns stage-1 output into a
    /// paragraph.
    pub fn two_stage(&self, input: &str, stage: u8) -> Result<Prompt, PromptError> {
        let (name, strategy) = match stage {
            1 => (TWO_STAGE_1, Strategy::TwoStage1),
            2 => (TWO_STAGE_2, Strategy::TwoStage2),
            s => return Err(PromptError::InvalidStage(s)),
        };
        let input = non_empty(input, PromptError::EmptyInput)?;
        let text = self.templates.render(name, &[("dialogue", input)])?;
        Ok(Prompt { text, strategy, k: 0, example_ids: vec![] })
    }

    pub fn header_classify(&self, dialogue: &str) -> Result<Prompt, PromptError> {
        let dialogue = non_empty(dialogue, PromptError::EmptyDialogue)?;
        let text = self.templates.render(HEADER_CLASSIFY, &[("dialogue", dialogue)])?;
        Ok(Prompt { text, strategy: Strategy::HeaderClassify, k: 0, example_ids: vec![] })
    }
}

pub fn render_prompt_selection_a(
    query_dialogue: &str,
    examples: &[&Example],
    header: SectionHeader,
) -> Result<Prompt, PromptError> {
    PromptRenderer::default().prompt_selection_a(query_dialogue, examples, header)
}

pub fn render_prompt_selection_b(query_dialogue: &str, examples: &[&Example]) -> Result<Prompt, PromptError> {
    PromptRenderer::default().prompt_selection_b(query_dialogue, examples)
}

pub fn render_zero_shot_b(dialogue: &str) -> Result<Prompt, PromptError> {
    PromptRenderer::default().zero_shot_b(dialogue)
}

pub fn render_section_fewshot_a(
    dialogue: &str,
    section: MajorSection,
    exemplars: &TemplateSet,
) -> Result<Prompt, PromptError> {
    PromptRenderer::new(exemplars.clone()).section_fewshot_a(dialogue, section)
}

pub fn render_perspective_shift(input: &str, stage: u8) -> Result<Prompt, PromptError> {
    PromptRenderer::default().perspective_shift(input, stage)
}

pub fn render_two_stage(input: &str, stage: u8) -> Result<Prompt, PromptError> {
    PromptRenderer::default().two_stage(input, stage)
}

pub fn render_header_classify(dialogue: &str) -> Result<Prompt, PromptError> {
    PromptRenderer::default().header_classify(dialogue)
}
