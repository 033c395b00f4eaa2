#![allow(dead_code)]

use std::path::{Path, PathBuf};

use clinsum::corpus::{write_examples, ColumnMapping, Example, ExampleSet, SectionHeader, Task};
use clinsum::pipeline::{EmbeddingKind, EvalSplit, MockMode, PipelineConfig};
use clinsum::prompting::{
    render_header_classify, render_perspective_shift, render_prompt_selection_a, render_prompt_selection_b,
    render_section_fewshot_a, render_two_stage, render_zero_shot_b, Prompt,
};
use clinsum::{MajorSection, TemplateSet};

const SYMPTOMS: [&str; 10] = [
    "cough", "fever", "headache", "rash", "nausea", "dizziness", "back pain", "sore throat", "fatigue",
    "chest tightness",
];
const DURATIONS: [&str; 5] = ["two days", "a week", "three weeks", "a month", "since yesterday"];
const MEDS: [&str; 4] = ["ibuprofen", "amoxicillin", "lisinopril", "metformin"];
const EXTRAS: [&str; 7] = [
    "I sleep poorly", "my knee aches when I climb stairs", "no allergies that I know of",
    "my mother had diabetes", "I quit smoking last year", "I work nights at a warehouse", "nothing else",
];

/// Deterministic task A examples with distinct dialogues, cycling through
/// every header.
pub fn synthetic_task_a(n: usize) -> Vec<Example> {
    (0..n)
        .map(|i| {
            let symptom = SYMPTOMS[i % SYMPTOMS.len()];
            let duration = DURATIONS[(i / 2) % DURATIONS.len()];
            let med = MEDS[(i / 3) % MEDS.len()];
            let extra = EXTRAS[i % EXTRAS.len()];
            Example {
                id: format!("a{i:03}"),
                dialogue: format!(
                    "Doctor: What brings you in for visit {i}?\nPatient: I have had {symptom} for {duration}.\n\
                     Doctor: Are you taking anything for it?\nPatient: Some {med}. Also {extra}."
                ),
                summary: format!("The patient reports {symptom} for {duration}, treated with {med}."),
                header: Some(SectionHeader::ALL[i % SectionHeader::ALL.len()]),
                task: Task::A,
            }
        })
        .collect()
}

pub fn synthetic_task_b(n: usize) -> Vec<Example> {
    (0..n)
        .map(|i| {
            let symptom = SYMPTOMS[i % SYMPTOMS.len()];
            let med = MEDS[i % MEDS.len()];
            Example {
                id: format!("b{i:03}"),
                dialogue: format!(
                    "[doctor] hello, what brings you in today, visit {i}?\n[patient] {symptom} for {}.\n\
                     [doctor] let me examine you. lungs are clear.\n[doctor] we will start {med}.",
                    DURATIONS[i % DURATIONS.len()]
                ),
                summary: format!(
                    "CHIEF COMPLAINT\n\n{symptom}.\n\nHISTORY OF PRESENT ILLNESS\n\nThe patient presents with {symptom}.\n\n\
                     PHYSICAL EXAM\n\nLungs clear.\n\nASSESSMENT AND PLAN\n\nStart {med}."
                ),
                header: None,
                task: Task::B,
            }
        })
        .collect()
}

pub fn write_csv(dir: &Path, name: &str, task: Task, examples: Vec<Example>) -> PathBuf {
    let set = ExampleSet::new(task, examples).unwrap();
    let path = dir.join(name);
    let schema = ColumnMapping::default_for(task);
    write_examples(&set, std::fs::File::create(&path).unwrap(), &schema).unwrap();
    path
}

/// Offline task A config over `train`: canned mock, hash embedder.
pub fn offline_config(train: &Path, dir: &Path) -> PipelineConfig {
    let mut cfg = PipelineConfig { train_path: train.to_path_buf(), ..PipelineConfig::default() };
    cfg.llm.mock = Some(MockMode::Canned);
    cfg.llm.retry = clinsum::llm::RetryPolicy::no_delay(1);
    cfg.embedding.provider = EmbeddingKind::Hash;
    cfg.embedding.dimension = 256;
    cfg.cache_dir = Some(dir.join("cache"));
    cfg.out_dir = dir.join("runs");
    cfg
}

/// Config for the echo oracle: summarize the retrieval corpus itself with
/// the query left in its own candidate pool.
pub fn echo_config(train: &Path, dir: &Path) -> PipelineConfig {
    let mut cfg = offline_config(train, dir);
    cfg.llm.mock = Some(MockMode::Echo);
    cfg.evaluate_on = EvalSplit::Train;
    cfg.self_exclude = false;
    cfg
}

pub fn golden_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests").join("golden")
}

fn golden_example(id: &str, dialogue: &str, summary: &str, header: Option<SectionHeader>, task: Task) -> Example {
    Example { id: id.into(), dialogue: dialogue.into(), summary: summary.into(), header, task }
}

/// One rendering per prompt template, from fixed inputs.
pub fn golden_cases() -> Vec<(String, Prompt)> {
    let dialogue = "Doctor: Do you have any allergies?\nPatient: Penicillin gives me hives.";
    let a1 = golden_example(
        "11",
        "Doctor: Any medical problems?\nPatient: High blood pressure for ten years.",
        "Hypertension for ten years.",
        Some(SectionHeader::PastMedicalHx),
        Task::A,
    );
    let a2 = golden_example(
        "42",
        "Doctor: Any reactions to medicines?\nPatient: Sulfa drugs make me itch.",
        "Sulfa allergy.",
        Some(SectionHeader::Allergy),
        Task::A,
    );
    let note = golden_example(
        "D2N001",
        "[doctor] hi, how are you feeling?\n[patient] my knee has been swollen for a week.",
        "CHIEF COMPLAINT\n\nKnee swelling.\n\nHISTORY OF PRESENT ILLNESS\n\nOne week of right knee swelling.\n\n\
         PHYSICAL EXAM\n\nEffusion of the right knee.\n\nASSESSMENT AND PLAN\n\nKnee effusion. Ice and rest.",
        None,
        Task::B,
    );
    let full = "[doctor] what brings you in?\n[patient] i have had a cough for three days.";
    let templates = TemplateSet::builtin();
    let mut cases = vec![
        ("prompt_selection_a".to_string(), render_prompt_selection_a(dialogue, &[&a1, &a2], SectionHeader::Allergy).unwrap()),
        ("prompt_selection_b".to_string(), render_prompt_selection_b(full, &[&note]).unwrap()),
        ("zero_shot_b".to_string(), render_zero_shot_b(full).unwrap()),
        ("perspective_shift_1".to_string(), render_perspective_shift(full, 1).unwrap()),
        (
            "perspective_shift_2".to_string(),
            render_perspective_shift("The patient has had a cough for three days.", 2).unwrap(),
        ),
        ("two_stage_1".to_string(), render_two_stage(dialogue, 1).unwrap()),
        ("two_stage_2".to_string(), render_two_stage("- penicillin allergy\n- hives", 2).unwrap()),
        ("header_classify".to_string(), render_header_classify(dialogue).unwrap()),
    ];
    for section in MajorSection::ALL {
        cases.push((
            format!("section_fewshot_{}", section.as_str().to_lowercase()),
            render_section_fewshot_a(dialogue, section, &templates).unwrap(),
        ));
    }
    cases
}

/// Compare `text` with the golden file `name`. Setting `UPDATE_GOLDEN`
/// rewrites the file instead.
pub fn check_golden(name: &str, text: &str) -> Result<(), String> {
    let path = golden_dir().join(format!("{name}.txt"));
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        std::fs::create_dir_all(golden_dir()).unwrap();
        std::fs::write(&path, text).unwrap();
        return Ok(());
    }
    let expected = std::fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
    if expected == text {
        Ok(())
    } else {
        let at = expected.bytes().zip(text.bytes()).position(|(a, b)| a != b).unwrap_or(expected.len().min(text.len()));
        Err(format!("{name}: rendering differs from golden file at byte {at}"))
    }
}
