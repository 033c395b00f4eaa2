mod common;

use std::collections::BTreeSet;
use std::path::Path;
use std::sync::Arc;

use clinsum::classification::{write_predictions, HeaderPrediction, PredictionSource};
use clinsum::corpus::{SectionHeader, Task};
use clinsum::llm::{LlmClient, MockProvider, RetryPolicy};
use clinsum::pipeline::{
    cmd_ablate_k, cmd_classify, cmd_run, cmd_stability, read_manifest, replay_config, run_pipeline, ClassifyOptions,
    LlmLabelSource, PipelineConfig, PipelineDeps, PipelineError, SummaryStrategy,
};
use clinsum::selection::SelectionMethod;
use clinsum::MajorSection;
use common::{offline_config, synthetic_task_a, synthetic_task_b, write_csv};

fn task_a_config(dir: &Path, n: usize) -> PipelineConfig {
    let train = write_csv(dir, "train.csv", Task::A, synthetic_task_a(n));
    offline_config(&train, dir)
}

fn task_b_config(dir: &Path, n: usize) -> PipelineConfig {
    let train = write_csv(dir, "notes.csv", Task::B, synthetic_task_b(n));
    let mut cfg = offline_config(&train, dir);
    cfg.task = Task::B;
    cfg
}

fn deps(cfg: &PipelineConfig) -> PipelineDeps {
    PipelineDeps::from_config(cfg).unwrap()
}

#[test]
fn task_b_rejects_several_full_notes_unless_allowed() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = task_b_config(dir.path(), 10);
    cfg.k = Some(2);
    let err = run_pipeline(&cfg, &deps(&cfg)).unwrap_err();
    assert!(matches!(err, PipelineError::ContextLength { k: 2 }), "{err}");
    assert!(err.to_string().contains("allow_long_context"));

    cfg.allow_long_context = true;
    let out = run_pipeline(&cfg, &deps(&cfg)).unwrap();
    assert_eq!(out.manifest.failed, 0);
    for ex in &out.manifest.examples {
        assert_eq!(ex.prompts.len(), 1);
        assert_eq!(ex.prompts[0].example_ids.len(), 2);
    }
}

#[test]
fn task_b_default_uses_one_example() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = task_b_config(dir.path(), 10);
    let out = run_pipeline(&cfg, &deps(&cfg)).unwrap();
    assert_eq!(out.manifest.config.k, Some(1));
    assert_eq!(out.generations.len(), 2);
    let report = out.report.unwrap();
    assert_eq!(report.evaluated, 2);
    for ex in &out.manifest.examples {
        let sel = ex.selection.as_ref().unwrap();
        assert_eq!(sel.chosen.len(), 1);
        assert_ne!(sel.chosen[0].id, ex.id);
    }
}

#[test]
fn every_generation_traces_to_a_manifest_prompt() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = task_a_config(dir.path(), 40);
    let (out, run_dir) = cmd_run(&cfg, &deps(&cfg)).unwrap();
    let hashes = out.manifest.prompt_hashes();
    assert_eq!(out.generations.len(), 8);
    for (id, text) in &out.generations {
        // The canned mock embeds a prefix of the prompt hash in its answer.
        let prefix = text.strip_prefix("mock completion ").unwrap();
        let ex = out.manifest.examples.iter().find(|e| &e.id == id).unwrap();
        assert_eq!(ex.prompts.len(), 1);
        assert!(ex.prompts[0].prompt_hash.starts_with(prefix));
        assert!(hashes.contains(ex.prompts[0].prompt_hash.as_str()));
        assert_eq!(ex.prompts[0].example_ids, ex.selection.as_ref().unwrap().ids());
        assert_eq!(ex.output_sha256.as_deref(), Some(clinsum::digest::sha256_hex(text.as_bytes()).as_str()));
    }
    for t in &out.timing.completions {
        assert!(hashes.contains(t.prompt_hash.as_str()));
    }
    for name in ["manifest.json", "timing.json", "generations.csv", "report.json", "report.txt", "report.csv"] {
        assert!(run_dir.join(name).is_file(), "{name} missing");
    }
    let dir_name = run_dir.file_name().unwrap().to_str().unwrap().to_string();
    assert!(dir_name.ends_with(&out.manifest.config_sha256[..8]));
}

#[test]
fn second_run_gets_its_own_directory_and_hits_the_cache() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = task_a_config(dir.path(), 30);
    let d = deps(&cfg);
    let (_, first) = cmd_run(&cfg, &d).unwrap();
    let (out, second) = cmd_run(&cfg, &d).unwrap();
    assert_ne!(first, second);
    assert!(out.timing.completions.iter().all(|c| c.from_cache));
    assert_eq!(
        std::fs::read(first.join("manifest.json")).unwrap(),
        std::fs::read(second.join("manifest.json")).unwrap()
    );
}

#[test]
fn replay_reproduces_the_manifest_and_detects_changed_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = task_a_config(dir.path(), 30);
    cfg.method = SelectionMethod::Mmr;
    cfg.lambda = 0.3;
    cfg.k = Some(3);
    let (out, run_dir) = cmd_run(&cfg, &deps(&cfg)).unwrap();
    let manifest = read_manifest(&run_dir.join("manifest.json")).unwrap();
    assert_eq!(manifest.to_json(), out.manifest.to_json());

    let mut replay = replay_config(&manifest).unwrap();
    assert_eq!(replay.lambda, 0.3);
    replay.cache_dir = cfg.cache_dir.clone();
    replay.out_dir = cfg.out_dir.clone();
    let again = run_pipeline(&replay, &deps(&replay)).unwrap();
    assert_eq!(again.manifest.to_json(), out.manifest.to_json());
    assert_eq!(again.generations, out.generations);

    let mut rows = synthetic_task_a(30);
    rows[0].summary.push_str(" Edited.");
    write_csv(dir.path(), "train.csv", Task::A, rows);
    assert!(matches!(replay_config(&manifest), Err(PipelineError::Config(_))));
    assert!(matches!(
        read_manifest(&dir.path().join("nope.json")),
        Err(PipelineError::Manifest { .. })
    ));
}

#[test]
fn stability_reports_each_run_and_the_spread() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = task_a_config(dir.path(), 30);
    let d = deps(&cfg);
    let (report, outputs) = cmd_stability(&cfg, &d, 3, false).unwrap();
    assert_eq!(report.runs.len(), 3);
    assert_eq!(outputs.len(), 3);
    assert_eq!(report.runs.iter().map(|r| r.run).collect::<Vec<_>>(), vec![1, 2, 3]);
    for key in ["rouge1_f1", "rouge2_f1", "rouge_l_f1"] {
        let s = &report.aggregate[key];
        assert_eq!(s.stddev, 0.0, "{key}");
        assert_eq!(s.min, s.max);
    }
    assert!(report.to_table().contains("Mean"));
    assert!(matches!(cmd_stability(&cfg, &d, 1, false), Err(PipelineError::TooFewRuns(1))));
}

#[test]
fn stability_cache_bypass_calls_the_provider_every_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = task_a_config(dir.path(), 20);
    let mock = Arc::new(MockProvider::canned());
    let mut d = deps(&cfg);
    d.llm = LlmClient { provider: mock.clone(), ..d.llm };
    cmd_stability(&cfg, &d, 2, true).unwrap();
    assert_eq!(mock.calls(), 8);
    cmd_stability(&cfg, &d, 2, false).unwrap();
    assert_eq!(mock.calls(), 8);
}

#[test]
fn ablation_runs_once_per_k() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = task_a_config(dir.path(), 30);
    let d = deps(&cfg);
    let (report, outputs) = cmd_ablate_k(&cfg, &d, &[1, 3, 5]).unwrap();
    assert_eq!(report.rows.iter().map(|r| r.k).collect::<Vec<_>>(), vec![1, 3, 5]);
    for (row, out) in report.rows.iter().zip(&outputs) {
        assert_eq!(row.evaluated, 6);
        assert_eq!(row.failed, 0);
        assert_eq!(row.config_sha256, out.manifest.config_sha256);
        assert!(out.manifest.examples.iter().all(|e| e.prompts[0].example_ids.len() == row.k));
    }
    let distinct: BTreeSet<&str> = report.rows.iter().map(|r| r.config_sha256.as_str()).collect();
    assert_eq!(distinct.len(), 3);
    assert!(matches!(cmd_ablate_k(&cfg, &d, &[]), Err(PipelineError::EmptyKList)));

    let bdir = tempfile::tempdir().unwrap();
    let b = task_b_config(bdir.path(), 10);
    assert!(matches!(cmd_ablate_k(&b, &deps(&b), &[1]), Err(PipelineError::TaskAOnly(_))));
}

fn write_labels(path: &Path, labels: &[(String, SectionHeader)]) {
    let preds: Vec<HeaderPrediction> =
        labels.iter().map(|(id, h)| HeaderPrediction::new(id.clone(), *h, PredictionSource::Finetuned)).collect();
    write_predictions(&preds, std::fs::File::create(path).unwrap()).unwrap();
}

/// Task A config evaluated on the whole file, so gold labels are known.
fn classify_setup(dir: &Path) -> (PipelineConfig, Vec<(String, SectionHeader)>) {
    let rows = synthetic_task_a(40);
    let gold: Vec<(String, SectionHeader)> = rows.iter().map(|e| (e.id.clone(), e.header.unwrap())).collect();
    let mut cfg = task_a_config(dir, 40);
    cfg.eval_path = Some(cfg.train_path.clone());
    (cfg, gold)
}

/// The next header after `h` that is not in `avoid`.
fn wrong(h: SectionHeader, avoid: &[SectionHeader]) -> SectionHeader {
    let i = SectionHeader::ALL.iter().position(|x| *x == h).unwrap();
    (1..SectionHeader::ALL.len())
        .map(|d| SectionHeader::ALL[(i + d) % SectionHeader::ALL.len()])
        .find(|x| !avoid.contains(x))
        .unwrap()
}

#[test]
fn classify_perfect_predictions_score_one() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, gold) = classify_setup(dir.path());
    let ft = dir.path().join("ft.csv");
    write_labels(&ft, &gold);
    let opts = ClassifyOptions { llm_labels: LlmLabelSource::None, finetuned_path: Some(ft), ensemble: false };
    let report = cmd_classify(&cfg, &deps(&cfg), &opts).unwrap();
    let r = report.finetuned.unwrap();
    assert_eq!((r.accuracy, r.correct, r.total), (1.0, 40, 40));
    assert!(report.llm.is_none());
    assert!(report.ensemble.is_none());
}

#[test]
fn ensemble_beats_both_sources_when_they_are_complementary() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, gold) = classify_setup(dir.path());
    let overrides = [SectionHeader::Ros, SectionHeader::Genhx, SectionHeader::Cc];
    // The fine-tuned model is right exactly on the override labels and never
    // predicts one wrongly; the LLM is right everywhere else.
    let ft_labels: Vec<_> =
        gold.iter().map(|(id, h)| (id.clone(), if overrides.contains(h) { *h } else { wrong(*h, &overrides) })).collect();
    let llm_labels: Vec<_> =
        gold.iter().map(|(id, h)| (id.clone(), if overrides.contains(h) { wrong(*h, &[]) } else { *h })).collect();
    let (ft, llm) = (dir.path().join("ft.csv"), dir.path().join("llm.csv"));
    write_labels(&ft, &ft_labels);
    write_labels(&llm, &llm_labels);
    let opts = ClassifyOptions { llm_labels: LlmLabelSource::File(llm), finetuned_path: Some(ft), ensemble: true };
    let report = cmd_classify(&cfg, &deps(&cfg), &opts).unwrap();
    let (l, f, e) = (report.llm.clone().unwrap(), report.finetuned.clone().unwrap(), report.ensemble.clone().unwrap());
    assert_eq!(e.accuracy, 1.0);
    assert!(e.accuracy >= l.accuracy.max(f.accuracy));
    assert!(l.accuracy < 1.0 && f.accuracy < 1.0);
    assert!((l.accuracy + f.accuracy - 1.0).abs() < 1e-12);
    assert_eq!(report.predictions.len(), 40);
    assert!(report.to_table().contains("Ensemble"));
}

#[test]
fn ensemble_requires_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, _) = classify_setup(dir.path());
    let d = deps(&cfg);
    let opts = ClassifyOptions { llm_labels: LlmLabelSource::Provider, finetuned_path: None, ensemble: true };
    assert!(matches!(cmd_classify(&cfg, &d, &opts), Err(PipelineError::MissingPredictions)));
    let ft = dir.path().join("ft.csv");
    write_labels(&ft, &[]);
    let opts = ClassifyOptions { llm_labels: LlmLabelSource::None, finetuned_path: Some(ft), ensemble: true };
    assert!(matches!(cmd_classify(&cfg, &d, &opts), Err(PipelineError::MissingLlmLabels)));
}

#[test]
fn provider_labels_count_unparseable_answers_as_wrong() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, gold) = classify_setup(dir.path());
    let mut d = deps(&cfg);
    // Answers GENHX, except for visits mentioning a rash where it rambles.
    let mock = MockProvider::from_fn("labeler", |p, _| {
        Ok(if p.contains("rash") { "I am not sure.".to_string() } else { "Label: GENHX".to_string() })
    });
    d.llm = LlmClient::new(Arc::new(mock)).with_retry(RetryPolicy::no_delay(1));
    let opts = ClassifyOptions { llm_labels: LlmLabelSource::Provider, finetuned_path: None, ensemble: false };
    let report = cmd_classify(&cfg, &d, &opts).unwrap();
    let rambling: BTreeSet<String> =
        synthetic_task_a(40).into_iter().filter(|e| e.dialogue.contains("rash")).map(|e| e.id).collect();
    assert_eq!(report.unparseable.iter().cloned().collect::<BTreeSet<_>>(), rambling);
    let expected = gold.iter().filter(|(id, h)| *h == SectionHeader::Genhx && !rambling.contains(id)).count();
    let llm = report.llm.unwrap();
    assert_eq!(llm.total, 40);
    assert_eq!(llm.correct, expected);
    assert_eq!(report.prompt_hashes.len(), 40);
}

#[test]
fn finetuned_rows_outside_the_eval_set_are_ignored() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, mut gold) = classify_setup(dir.path());
    gold.push(("stranger".into(), SectionHeader::Cc));
    let ft = dir.path().join("ft.csv");
    write_labels(&ft, &gold);
    let opts = ClassifyOptions { llm_labels: LlmLabelSource::None, finetuned_path: Some(ft), ensemble: false };
    let report = cmd_classify(&cfg, &deps(&cfg), &opts).unwrap();
    assert_eq!(report.ignored_finetuned, 1);
    assert_eq!(report.finetuned.unwrap().total, 40);
}

#[test]
fn two_stage_and_perspective_shift_chain_their_prompts() {
    for (strategy, task) in [(SummaryStrategy::TwoStage, Task::A), (SummaryStrategy::PerspectiveShift, Task::B)] {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = match task {
            Task::A => task_a_config(dir.path(), 20),
            Task::B => task_b_config(dir.path(), 10),
        };
        cfg.strategy = strategy;
        let out = run_pipeline(&cfg, &deps(&cfg)).unwrap();
        assert!(out.manifest.embedding_provider.is_none());
        for ex in &out.manifest.examples {
            assert!(ex.selection.is_none());
            let stages: Vec<&str> = ex.prompts.iter().map(|p| p.stage.as_str()).collect();
            assert_eq!(stages, ["stage-1", "stage-2"]);
            // The final text answers the second prompt.
            let text = &out.generations[&ex.id];
            assert!(ex.prompts[1].prompt_hash.starts_with(text.strip_prefix("mock completion ").unwrap()));
        }
    }
}

#[test]
fn section_assembly_joins_one_answer_per_major_section() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = task_b_config(dir.path(), 10);
    cfg.strategy = SummaryStrategy::SectionAssembly;
    let out = run_pipeline(&cfg, &deps(&cfg)).unwrap();
    for ex in &out.manifest.examples {
        assert_eq!(ex.prompts.len(), MajorSection::ALL.len());
        let text = &out.generations[&ex.id];
        let parts: Vec<&str> = text.split("\n\n").collect();
        assert_eq!(parts.len(), MajorSection::ALL.len());
        for ((part, section), record) in parts.iter().zip(MajorSection::ALL).zip(&ex.prompts) {
            assert_eq!(record.stage, format!("section:{}", section.as_str()));
            let (title, body) = part.split_once('\n').unwrap();
            assert_eq!(title, section.title());
            assert!(record.prompt_hash.starts_with(body.strip_prefix("mock completion ").unwrap()));
        }
    }
}

#[test]
fn section_fewshot_and_zero_shot_respect_their_tasks() {
    let dir = tempfile::tempdir().unwrap();
    let mut a = task_a_config(dir.path(), 20);
    a.strategy = SummaryStrategy::SectionFewshot;
    let out = run_pipeline(&a, &deps(&a)).unwrap();
    assert_eq!(out.manifest.failed, 0);
    a.strategy = SummaryStrategy::ZeroShot;
    assert!(matches!(run_pipeline(&a, &deps(&a)), Err(PipelineError::Config(_))));

    let bdir = tempfile::tempdir().unwrap();
    let mut b = task_b_config(bdir.path(), 10);
    b.strategy = SummaryStrategy::ZeroShot;
    assert_eq!(run_pipeline(&b, &deps(&b)).unwrap().manifest.failed, 0);
    b.strategy = SummaryStrategy::SectionFewshot;
    assert!(matches!(run_pipeline(&b, &deps(&b)), Err(PipelineError::Config(_))));
}

#[test]
fn completion_failures_are_recorded_per_example() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = task_a_config(dir.path(), 30);
    let mut d = deps(&cfg);
    let mock = MockProvider::from_fn("picky", |p, _| {
        if p.contains("fever") {
            Err(clinsum::llm::ProviderError::fatal("refused"))
        } else {
            Ok("fine".into())
        }
    });
    d.llm = LlmClient::new(Arc::new(mock)).with_retry(RetryPolicy::no_delay(1));
    let out = run_pipeline(&cfg, &d).unwrap();
    assert!(out.manifest.failed > 0);
    assert_eq!(out.manifest.completed + out.manifest.failed, 6);
    for ex in &out.manifest.examples {
        assert_eq!(ex.error.is_some(), ex.output_sha256.is_none());
        assert_eq!(ex.error.is_some(), !out.generations.contains_key(&ex.id));
    }
}

#[test]
fn invalid_settings_are_rejected_before_any_work() {
    let dir = tempfile::tempdir().unwrap();
    let base = task_a_config(dir.path(), 10);
    for cfg in [
        PipelineConfig { k: Some(0), ..base.clone() },
        PipelineConfig { lambda: 1.5, ..base.clone() },
        PipelineConfig { max_in_flight: 0, ..base.clone() },
    ] {
        assert!(matches!(run_pipeline(&cfg, &deps(&base)), Err(PipelineError::Config(_))));
    }
}
