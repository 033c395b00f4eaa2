use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use clinsum::corpus::Task;
use clinsum::pipeline::{EmbeddingKind, EvalSplit, MockMode, PipelineConfig, SummaryStrategy};
use clinsum::selection::SelectionMethod;

use crate::CliError;

#[derive(Debug, Parser)]
#[command(name = "clinsum", version, about = "Few-shot clinical dialogue summarization and evaluation")]
pub struct Cli {
    /// TOML config file. Flags override its values.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,

    /// Print reports as JSON instead of text tables.
    #[arg(long, global = true)]
    pub json: bool,

    #[command(flatten)]
    pub overrides: Overrides,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate a dataset file and print its statistics.
    Ingest {
        input: PathBuf,
        /// Write the seeded train/validation split as train.csv and validation.csv here.
        #[arg(long, value_name = "DIR")]
        split_out: Option<PathBuf>,
    },
    /// Embed the retrieval corpus and write a vector file.
    Embed {
        #[arg(long, short, value_name = "PATH")]
        output: PathBuf,
    },
    /// Summarize the evaluation set and write a run directory.
    Run {
        /// Re-run the config recorded in a manifest.
        #[arg(long, value_name = "MANIFEST")]
        replay: Option<PathBuf>,
    },
    /// One run per k over a shared cache (task A).
    AblateK {
        #[arg(long, value_delimiter = ',', default_value = "3,5,7")]
        ks: Vec<usize>,
    },
    /// Repeat a run and report the spread of each metric.
    Stability {
        #[arg(long, default_value_t = 3)]
        runs: usize,
        /// Skip cache reads so every run queries the provider.
        #[arg(long)]
        no_cache: bool,
    },
    /// Section header classification accuracy (task A).
    Classify {
        /// Two-column (example_id, label) CSV from the fine-tuned classifier.
        #[arg(long, value_name = "PATH")]
        finetuned_preds: Option<PathBuf>,
        /// Read LLM labels from a CSV instead of prompting the provider.
        #[arg(long, value_name = "PATH", conflicts_with = "no_llm")]
        llm_labels: Option<PathBuf>,
        /// Evaluate the fine-tuned predictions alone.
        #[arg(long)]
        no_llm: bool,
        /// Combine both label sources with the override rule.
        #[arg(long)]
        ensemble: bool,
    },
    /// Print a stored report, or score an (id, generation) file.
    Report {
        /// Run directory holding report.json.
        #[arg(long, value_name = "DIR", conflicts_with = "generations")]
        run_dir: Option<PathBuf>,
        #[arg(long, value_name = "PATH", requires = "references")]
        generations: Option<PathBuf>,
        /// Dataset file with reference summaries.
        #[arg(long, value_name = "PATH")]
        references: Option<PathBuf>,
        /// CSV of externally computed BERTScore/BLEURT values.
        #[arg(long, value_name = "PATH")]
        external: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TaskArg {
    A,
    B,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    TopK,
    Mmr,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MockArg {
    Canned,
    Echo,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EmbeddingArg {
    Hash,
    Precomputed,
    Http,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Validation,
    Train,
}

/// Pipeline settings settable from the command line.
#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    #[arg(long, global = true, value_enum)]
    pub task: Option<TaskArg>,
    /// prompt-selection, zero-shot, section-fewshot, perspective-shift, two-stage or section-assembly.
    #[arg(long, global = true)]
    pub strategy: Option<SummaryStrategy>,
    #[arg(long, global = true, value_enum)]
    pub method: Option<MethodArg>,
    #[arg(long, global = true)]
    pub k: Option<usize>,
    #[arg(long, global = true)]
    pub lambda: Option<f64>,
    #[arg(long, global = true)]
    pub model: Option<String>,
    #[arg(long, global = true)]
    pub temperature: Option<f64>,
    #[arg(long, global = true, value_name = "DIR")]
    pub cache_dir: Option<PathBuf>,
    /// Use an offline completion provider.
    #[arg(long, global = true, value_enum)]
    pub mock: Option<MockArg>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, value_name = "PATH")]
    pub train: Option<PathBuf>,
    #[arg(long, global = true, value_name = "PATH")]
    pub eval: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    pub evaluate_on: Option<SplitArg>,
    #[arg(long, global = true, value_name = "DIR")]
    pub out_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    pub limit: Option<usize>,
    #[arg(long, global = true)]
    pub max_in_flight: Option<usize>,
    /// Permit several full-note examples for task B.
    #[arg(long, global = true)]
    pub allow_long_context: bool,
    #[arg(long, global = true, value_enum)]
    pub embedding: Option<EmbeddingArg>,
    /// Vector file for precomputed embeddings.
    #[arg(long, global = true, value_name = "PATH")]
    pub vectors: Option<PathBuf>,
    #[arg(long, global = true, value_name = "DIR")]
    pub templates_dir: Option<PathBuf>,
}

impl Overrides {
    /// True if any setting that changes run outputs was given.
    pub fn touches_run(&self) -> bool {
        let Overrides {
            task,
            strategy,
            method,
            k,
            lambda,
            model,
            temperature,
            cache_dir: _,
            mock,
            seed,
            train,
            eval,
            evaluate_on,
            out_dir: _,
            limit,
            max_in_flight: _,
            allow_long_context,
            embedding,
            vectors,
            templates_dir,
        } = self;
        task.is_some()
            || strategy.is_some()
            || method.is_some()
            || k.is_some()
            || lambda.is_some()
            || model.is_some()
            || temperature.is_some()
            || mock.is_some()
            || seed.is_some()
            || train.is_some()
            || eval.is_some()
            || evaluate_on.is_some()
            || limit.is_some()
            || *allow_long_context
            || embedding.is_some()
            || vectors.is_some()
            || templates_dir.is_some()
    }

    pub fn apply(&self, cfg: &mut PipelineConfig) {
        if let Some(t) = self.task {
            cfg.task = match t {
                TaskArg::A => Task::A,
                TaskArg::B => Task::B,
            };
        }
        if let Some(s) = self.strategy {
            cfg.strategy = s;
        }
        if let Some(m) = self.method {
            cfg.method = match m {
                MethodArg::TopK => SelectionMethod::TopKSimilarity,
                MethodArg::Mmr => SelectionMethod::Mmr,
            };
        }
        if self.k.is_some() {
            cfg.k = self.k;
        }
        if let Some(l) = self.lambda {
            cfg.lambda = l;
        }
        if let Some(m) = &self.model {
            cfg.generation.model = m.clone();
        }
        if let Some(t) = self.temperature {
            cfg.generation.temperature = t;
        }
        if let Some(d) = &self.cache_dir {
            cfg.cache_dir = Some(d.clone());
        }
        if let Some(m) = self.mock {
            cfg.llm.mock = Some(match m {
                MockArg::Canned => MockMode::Canned,
                MockArg::Echo => MockMode::Echo,
            });
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(p) = &self.train {
            cfg.train_path = p.clone();
        }
        if let Some(p) = &self.eval {
            cfg.eval_path = Some(p.clone());
        }
        if let Some(s) = self.evaluate_on {
            cfg.evaluate_on = match s {
                SplitArg::Validation => EvalSplit::Validation,
                SplitArg::Train => EvalSplit::Train,
            };
        }
        if let Some(d) = &self.out_dir {
            cfg.out_dir = d.clone();
        }
        if self.limit.is_some() {
            cfg.limit = self.limit;
        }
        if let Some(n) = self.max_in_flight {
            cfg.max_in_flight = n;
        }
        if self.allow_long_context {
            cfg.allow_long_context = true;
        }
        if let Some(e) = self.embedding {
            cfg.embedding.provider = match e {
                EmbeddingArg::Hash => EmbeddingKind::Hash,
                EmbeddingArg::Precomputed => EmbeddingKind::Precomputed,
                EmbeddingArg::Http => EmbeddingKind::Http,
            };
        }
        if let Some(p) = &self.vectors {
            cfg.embedding.vectors_path = Some(p.clone());
        }
        if let Some(d) = &self.templates_dir {
            cfg.templates_dir = Some(d.clone());
        }
    }
}

/// Defaults, then the config file, then flags.
pub fn load_config(path: Option<&Path>, overrides: &Overrides) -> Result<PipelineConfig, CliError> {
    let mut cfg = match path {
        Some(path) => read_config_file(path)?,
        None => PipelineConfig::default(),
    };
    overrides.apply(&mut cfg);
    Ok(cfg)
}

pub fn read_config_file(path: &Path) -> Result<PipelineConfig, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Config { path: path.to_path_buf(), message: e.to_string() })?;
    toml::from_str(&text).map_err(|e| CliError::Config { path: path.to_path_buf(), message: e.to_string() })
}
