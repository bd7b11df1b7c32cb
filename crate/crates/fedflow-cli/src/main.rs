//! `fedflow` — federated semi-supervised traffic classification experiments.

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use fedflow_core::config::ExperimentConfig;
use fedflow_core::metrics::Metrics;
use fedflow_core::pipeline::{
    compare_modes, run_pipeline, stage_datagen, stage_evaluate, stage_preprocess, stage_pretrain,
    stage_retrain, ArtifactPaths,
};
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "fedflow",
    version,
    about = "Simulate federated semi-supervised traffic classification experiments",
    after_help = "Configuration comes from --config (key = value lines); \
                  every key has a default and flags override file values."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Config file with `key = value` lines.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Master seed; every stage derives its own stream from it.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory for all artifacts.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Pretraining mode.
    #[arg(long, global = true, value_enum)]
    mode: Option<ModeArg>,

    /// Subflow sampling method.
    #[arg(long, global = true, value_enum)]
    sampling: Option<SamplingArg>,
}

#[derive(Copy, Clone, ValueEnum)]
enum ModeArg {
    Fssl,
    Centralized,
}

#[derive(Copy, Clone, ValueEnum)]
enum SamplingArg {
    Simple,
    Incremental,
}

#[derive(Subcommand)]
enum Command {
    /// Generate (or locate) the labeled and unlabeled flow record files.
    Datagen,
    /// Sample subflows, extract features, partition clients, split the
    /// server train/test sets, and write the binary caches.
    Preprocess,
    /// Run the pretraining stage from the preprocessed caches.
    Pretrain,
    /// Retrain the classifier from the pretrain checkpoint.
    Retrain,
    /// Evaluate the classifier checkpoint and write the metrics report.
    Evaluate,
    /// Full pipeline: datagen, preprocess, pretrain, retrain, evaluate.
    Run,
    /// Run both modes over the configured sampling methods and report the
    /// accuracy gaps.
    Compare,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut config = match &cli.config {
        Some(path) => ExperimentConfig::from_file(path)
            .with_context(|| format!("loading config {}", path.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(out) = &cli.out {
        config.out_dir = out.clone();
    }
    if let Some(mode) = cli.mode {
        let value = match mode {
            ModeArg::Fssl => "fssl",
            ModeArg::Centralized => "centralized",
        };
        config.apply("mode", value).map_err(anyhow::Error::msg)?;
    }
    if let Some(sampling) = cli.sampling {
        let value = match sampling {
            SamplingArg::Simple => "simple",
            SamplingArg::Incremental => "incremental",
        };
        config
            .apply("sampling.method", value)
            .map_err(anyhow::Error::msg)?;
    }
    config.validate()?;
    Ok(config)
}

fn print_metrics(label: &str, metrics: &Metrics) {
    println!(
        "{label}: accuracy {:.4}, macro precision {:.4}, macro recall {:.4}, macro f1 {:.4} ({} examples)",
        metrics.accuracy,
        metrics.macro_avg.precision,
        metrics.macro_avg.recall,
        metrics.macro_avg.f1,
        metrics.total()
    );
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let config = load_config(&cli)?;
    let method = config.sampling.method;
    let paths = ArtifactPaths::new(&config.out_dir);
    match cli.command {
        Command::Datagen => {
            let (labeled, unlabeled) = stage_datagen(&config)?;
            println!("labeled flows:   {}", labeled.display());
            println!("unlabeled flows: {}", unlabeled.display());
        }
        Command::Preprocess => {
            let partition = stage_preprocess(&config, method)?;
            println!(
                "{} unlabeled subflows across {} clients; {} train / {} test labeled subflows",
                partition.unlabeled_len(),
                partition.client_datasets.len(),
                partition.server_train.len(),
                partition.server_test.len()
            );
            println!("caches under {}", config.out_dir.join(method.as_str()).display());
        }
        Command::Pretrain => {
            let (_, records) = stage_pretrain(&config, method)?;
            let last = records.last().expect("at least one round");
            println!(
                "{} rounds, final loss {:.6}",
                records.len(),
                last.global_loss
            );
            println!(
                "checkpoint: {}",
                paths.pretrain_checkpoint(method, config.mode).display()
            );
        }
        Command::Retrain => {
            stage_retrain(&config, method)?;
            println!(
                "checkpoint: {}",
                paths.retrain_checkpoint(method, config.mode).display()
            );
        }
        Command::Evaluate => {
            let (metrics, flow_metrics, report) = stage_evaluate(&config, method)?;
            print_metrics("subflow-level", &metrics);
            print_metrics("flow-level   ", &flow_metrics);
            println!("report: {}", report.display());
        }
        Command::Run => {
            let outcome = run_pipeline(&config)?;
            print_metrics("subflow-level", &outcome.metrics);
            print_metrics("flow-level   ", &outcome.flow_metrics);
            println!("report: {}", outcome.report_path.display());
        }
        Command::Compare => {
            let report = compare_modes(&config)?;
            for block in &report.blocks {
                print_metrics(
                    &format!("{}/{}", block.method.as_str(), block.mode.as_str()),
                    &block.metrics,
                );
            }
            for (sampling_method, gap) in &report.gaps {
                println!(
                    "gap (centralized - fssl) with {} sampling: {gap:.4} points",
                    sampling_method.as_str()
                );
            }
            println!("report: {}", report.report_path.display());
        }
    }
    Ok(())
}
