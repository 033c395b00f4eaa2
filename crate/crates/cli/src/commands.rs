use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clinsum::corpus::{load_examples, split_train_validation, write_examples, ExampleSet, Task};
use clinsum::digest::file_sha256_hex;
use clinsum::embedding::embed_corpus;
use clinsum::metrics::{corpus_report_with_external, read_external_scores, tokenize, MetricReport};
use clinsum::pipeline::{
    build_embedder, cmd_ablate_k, cmd_classify, cmd_run, cmd_stability, create_output_dir, load_run_data,
    read_generations, read_manifest, replay_config, write_run, ClassifyOptions, LlmLabelSource, PipelineConfig,
    PipelineDeps,
};
use serde_json::json;

use crate::args::{load_config, Cli, Command};
use crate::CliError;

fn open(path: &Path) -> Result<std::fs::File, CliError> {
    std::fs::File::open(path).map_err(|source| CliError::File { path: path.to_path_buf(), source })
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    std::fs::write(path, contents).map_err(|source| CliError::File { path: path.to_path_buf(), source })
}

/// Run the parsed command and return what goes to stdout.
pub fn dispatch(cli: Cli) -> Result<String, CliError> {
    let cfg = load_config(cli.config.as_deref(), &cli.overrides)?;
    match cli.command {
        Command::Ingest { input, split_out } => ingest(&cfg, &input, split_out.as_deref(), cli.json),
        Command::Embed { output } => embed(&cfg, &output, cli.json),
        Command::Run { replay: Some(manifest) } => {
            if cli.overrides.touches_run() {
                return Err(CliError::Usage(
                    "--replay reruns the recorded config; only --cache-dir, --out-dir and --max-in-flight may be given"
                        .into(),
                ));
            }
            let mut replayed = replay_config(&read_manifest(&manifest)?)?;
            replayed.cache_dir = cfg.cache_dir.clone();
            replayed.out_dir = cfg.out_dir.clone();
            replayed.max_in_flight = cfg.max_in_flight;
            run(&replayed, cli.json)
        }
        Command::Run { replay: None } => run(&cfg, cli.json),
        Command::AblateK { ks } => ablate(&cfg, &ks, cli.json),
        Command::Stability { runs, no_cache } => stability(&cfg, runs, no_cache, cli.json),
        Command::Classify { finetuned_preds, llm_labels, no_llm, ensemble } => {
            let llm_labels = match (llm_labels, no_llm) {
                (Some(path), _) => LlmLabelSource::File(path),
                (None, true) => LlmLabelSource::None,
                (None, false) => LlmLabelSource::Provider,
            };
            classify(&cfg, ClassifyOptions { llm_labels, finetuned_path: finetuned_preds, ensemble }, cli.json)
        }
        Command::Report { run_dir: Some(dir), .. } => {
            let path = dir.join("report.json");
            let text = std::fs::read_to_string(&path).map_err(|source| CliError::File { path: path.clone(), source })?;
            let report: MetricReport = serde_json::from_str(&text)
                .map_err(|e| CliError::Usage(format!("{}: not a report: {e}", path.display())))?;
            Ok(render(&report, cli.json))
        }
        Command::Report { run_dir: None, generations: Some(generations), references, external } => {
            let references = references.expect("clap requires references with generations");
            score(&cfg, &generations, &references, external.as_deref(), cli.json)
        }
        Command::Report { .. } => Err(CliError::Usage("report needs --run-dir or --generations".into())),
    }
}

fn render(report: &MetricReport, as_json: bool) -> String {
    if as_json {
        report.to_json() + "\n"
    } else {
        report.summary_table()
    }
}

fn mean(xs: impl Iterator<Item = usize>) -> f64 {
    let (sum, n) = xs.fold((0usize, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        sum as f64 / n as f64
    }
}

fn ingest(cfg: &PipelineConfig, input: &Path, split_out: Option<&Path>, as_json: bool) -> Result<String, CliError> {
    let columns = cfg.columns();
    let set = load_examples(input, &columns, cfg.task)?;
    let mut headers: BTreeMap<String, usize> = BTreeMap::new();
    for ex in set.iter() {
        if let Some(h) = ex.header {
            *headers.entry(h.to_string()).or_default() += 1;
        }
    }
    let mut split = None;
    if let Some(dir) = split_out {
        let (train, valid) = split_train_validation(&set, cfg.train_fraction, cfg.seed)?;
        std::fs::create_dir_all(dir).map_err(|source| CliError::File { path: dir.to_path_buf(), source })?;
        for (name, part) in [("train.csv", &train), ("validation.csv", &valid)] {
            let path = dir.join(name);
            let file = std::fs::File::create(&path).map_err(|source| CliError::File { path: path.clone(), source })?;
            write_examples(part, file, &columns)?;
        }
        split = Some((train.len(), valid.len()));
    }
    let stats = json!({
        "path": input,
        "sha256": file_sha256_hex(input).map_err(|source| CliError::File { path: input.to_path_buf(), source })?,
        "task": set.task(),
        "examples": set.len(),
        "headers": headers,
        "mean_dialogue_tokens": mean(set.iter().map(|e| tokenize(&e.dialogue).len())),
        "mean_summary_tokens": mean(set.iter().map(|e| tokenize(&e.summary).len())),
        "split": split.map(|(t, v)| json!({"train": t, "validation": v, "seed": cfg.seed, "train_fraction": cfg.train_fraction})),
    });
    if as_json {
        return Ok(serde_json::to_string_pretty(&stats).expect("json") + "\n");
    }
    let mut out = String::new();
    writeln!(out, "examples: {} (task {})", set.len(), if set.task() == Task::A { "A" } else { "B" }).unwrap();
    writeln!(out, "mean dialogue tokens: {:.1}", stats["mean_dialogue_tokens"].as_f64().unwrap()).unwrap();
    writeln!(out, "mean summary tokens: {:.1}", stats["mean_summary_tokens"].as_f64().unwrap()).unwrap();
    for (h, n) in &headers {
        writeln!(out, "  {h:<16} {n:>6}").unwrap();
    }
    if let Some((t, v)) = split {
        writeln!(out, "split: {t} train / {v} validation").unwrap();
    }
    Ok(out)
}

fn embed(cfg: &PipelineConfig, output: &Path, as_json: bool) -> Result<String, CliError> {
    let cfg = cfg.resolved()?;
    let data = load_run_data(&cfg)?;
    let embedder = build_embedder(&cfg.embedding)?;
    let index = embed_corpus(embedder.as_ref(), &data.retrieval, &cfg.embedding.options)?;
    let file = std::fs::File::create(output).map_err(|source| CliError::File { path: output.to_path_buf(), source })?;
    index
        .write_vector_file(std::io::BufWriter::new(file))
        .map_err(|source| CliError::File { path: output.to_path_buf(), source })?;
    let summary = json!({
        "provider": index.provider_tag(),
        "dimension": index.dimension(),
        "vectors": index.len(),
        "output": output,
    });
    Ok(if as_json {
        serde_json::to_string_pretty(&summary).expect("json") + "\n"
    } else {
        format!("{} vectors of dimension {} ({}) -> {}\n", index.len(), index.dimension(), index.provider_tag(), output.display())
    })
}

fn run(cfg: &PipelineConfig, as_json: bool) -> Result<String, CliError> {
    let deps = PipelineDeps::from_config(cfg)?;
    let (output, dir) = cmd_run(cfg, &deps)?;
    let m = &output.manifest;
    let mut out = match &output.report {
        Some(report) => render(report, as_json),
        None if as_json => "null\n".into(),
        None => "no reference summaries: generations only\n".into(),
    };
    if !as_json {
        writeln!(out, "completed: {}  failed: {}", m.completed, m.failed).unwrap();
        writeln!(out, "run directory: {}", dir.display()).unwrap();
    } else {
        eprintln!("run directory: {}", dir.display());
    }
    Ok(out)
}

fn sweep_dir(cfg: &PipelineConfig, kind: &str) -> Result<PathBuf, CliError> {
    let resolved = cfg.resolved()?;
    Ok(create_output_dir(&cfg.out_dir, kind, &resolved.digest())?)
}

fn save_report(dir: &Path, json_text: &str, table: &str) -> Result<(), CliError> {
    write_file(&dir.join("report.json"), &(json_text.to_string() + "\n"))?;
    write_file(&dir.join("report.txt"), table)
}

fn ablate(cfg: &PipelineConfig, ks: &[usize], as_json: bool) -> Result<String, CliError> {
    let deps = PipelineDeps::from_config(cfg)?;
    let (report, outputs) = cmd_ablate_k(cfg, &deps, ks)?;
    let dir = sweep_dir(cfg, "ablate-k")?;
    for output in &outputs {
        write_run(&dir, output)?;
    }
    save_report(&dir, &report.to_json(), &report.to_table())?;
    eprintln!("sweep directory: {}", dir.display());
    Ok(if as_json { report.to_json() + "\n" } else { report.to_table() })
}

fn stability(cfg: &PipelineConfig, runs: usize, no_cache: bool, as_json: bool) -> Result<String, CliError> {
    let deps = PipelineDeps::from_config(cfg)?;
    let (report, outputs) = cmd_stability(cfg, &deps, runs, no_cache)?;
    let dir = sweep_dir(cfg, "stability")?;
    for output in &outputs {
        write_run(&dir, output)?;
    }
    save_report(&dir, &report.to_json(), &report.to_table())?;
    eprintln!("sweep directory: {}", dir.display());
    Ok(if as_json { report.to_json() + "\n" } else { report.to_table() })
}

fn classify(cfg: &PipelineConfig, opts: ClassifyOptions, as_json: bool) -> Result<String, CliError> {
    let deps = PipelineDeps::from_config(cfg)?;
    let report = cmd_classify(cfg, &deps, &opts)?;
    let dir = sweep_dir(cfg, "classify")?;
    save_report(&dir, &report.to_json(), &report.to_table())?;
    eprintln!("report directory: {}", dir.display());
    if as_json {
        return Ok(report.to_json() + "\n");
    }
    let mut out = report.to_table();
    if !report.unparseable.is_empty() {
        writeln!(out, "unparseable LLM labels: {}", report.unparseable.len()).unwrap();
    }
    if !report.failed.is_empty() {
        writeln!(out, "failed completions: {}", report.failed.len()).unwrap();
    }
    if report.ignored_finetuned > 0 {
        writeln!(out, "fine-tuned rows outside the evaluation set: {}", report.ignored_finetuned).unwrap();
    }
    Ok(out)
}

fn score(
    cfg: &PipelineConfig,
    generations: &Path,
    references: &Path,
    external: Option<&Path>,
    as_json: bool,
) -> Result<String, CliError> {
    let refs: ExampleSet = load_examples(references, &cfg.eval_columns(), cfg.task)?;
    let generated = read_generations(open(generations)?)?;
    let external = match external {
        Some(path) => read_external_scores(open(path)?).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?,
        None => BTreeMap::new(),
    };
    let report = corpus_report_with_external(&refs, &generated, &external)?;
    Ok(render(&report, as_json))
}
