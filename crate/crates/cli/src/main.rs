mod args;
mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config {path}: {message}")]
    Config { path: PathBuf, message: String },
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Pipeline(#[from] clinsum::pipeline::PipelineError),
    #[error(transparent)]
    Corpus(#[from] clinsum::corpus::CorpusError),
    #[error(transparent)]
    Embedding(#[from] clinsum::embedding::EmbeddingError),
    #[error(transparent)]
    Metric(#[from] clinsum::metrics::MetricError),
    #[error("{path}: {source}")]
    File { path: PathBuf, source: std::io::Error },
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()),
        )
        .with_writer(std::io::stderr)
        .without_time()
        .init();

    let cli = args::Cli::parse();
    match commands::dispatch(cli) {
        Ok(out) => {
            print!("{out}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
