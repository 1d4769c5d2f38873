//! `commentwatch`: runs one pipeline stage per invocation against a TOML
//! config.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};
use commentwatch::pipeline::{Overrides, Pipeline, Stage};
use commentwatch::{Category, Format};

#[derive(Parser)]
#[command(name = "commentwatch", version, about = "Inappropriate-comment classification and exposure reports")]
struct Cli {
    /// Pipeline config file.
    #[arg(long, global = true, default_value = "pipeline.toml")]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; 0 uses one per core.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Restrict per-model stages to one category.
    #[arg(long, global = true, value_parser = parse_category)]
    category: Option<Category>,
    /// Input format when it cannot be inferred from the file extension.
    #[arg(long, global = true)]
    format: Option<FormatArg>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Clean and tokenize corpora; writes token files and a drop report.
    Preprocess,
    /// Train the five category models on the base corpus.
    Train,
    /// Retrain the output layer on the domain tuning split.
    Finetune,
    /// Sweep thresholds and store the selected one in each model.
    Calibrate,
    /// Metrics against the held-out split.
    Evaluate,
    /// Score the unlabeled corpus into a prediction file.
    Classify,
    /// Exposure, channel, interaction, word and year reports.
    Measure,
    /// Manifest and human-readable summary.
    Report,
}

impl Command {
    fn stage(self) -> Stage {
        match self {
            Command::Preprocess => Stage::Preprocess,
            Command::Train => Stage::Train,
            Command::Finetune => Stage::Finetune,
            Command::Calibrate => Stage::Calibrate,
            Command::Evaluate => Stage::Evaluate,
            Command::Classify => Stage::Classify,
            Command::Measure => Stage::Measure,
            Command::Report => Stage::Report,
        }
    }
}

#[derive(ValueEnum, Clone, Copy)]
enum FormatArg {
    Csv,
    Jsonl,
}

fn parse_category(s: &str) -> Result<Category, String> {
    s.parse().map_err(|e: commentwatch::Error| e.to_string())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let overrides = Overrides {
        seed: cli.seed,
        format: cli.format.map(|f| match f {
            FormatArg::Csv => Format::Csv,
            FormatArg::Jsonl => Format::Jsonl,
        }),
        threads: cli.threads,
        category: cli.category,
    };
    let pipeline = Pipeline::from_file(&cli.config, &overrides)
        .with_context(|| format!("loading {}", cli.config.display()))?;
    let threads = pipeline.config().threads;
    if threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .context("starting worker pool")?;
    }
    let stage = cli.command.stage();
    pipeline.run(stage).with_context(|| format!("{stage} failed"))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
