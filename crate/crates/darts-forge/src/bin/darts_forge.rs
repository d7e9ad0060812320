//! Command-line front end for the experiment pipeline.
//!
//! Exit codes: 0 on success, 2 for configuration problems, 1 for runtime
//! failures.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use darts_forge::pipeline::{self, ExperimentConfig, PipelineError, STAGE_ORDER};

#[derive(Parser)]
#[command(name = "darts-forge", about = "Hybrid HMM-DNN speech recognition experiment driver")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct CommonArgs {
    /// Experiment configuration (TOML). Omit to use built-in defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the experiment seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Run all pipeline stages in order.
    All {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Run a subset of stages (comma-separated, in pipeline order).
    Run {
        /// Stages to run, e.g. "prepare,gmm,align".
        #[arg(long, value_delimiter = ',')]
        stages: Vec<String>,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Run the experiment matrix defined by [[matrix]] entries.
    Matrix {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Print the default configuration as TOML.
    DefaultConfig,
    /// List pipeline stages in execution order.
    Stages,
}

fn load_config(common: &CommonArgs) -> Result<ExperimentConfig, PipelineError> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::from_path(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.out_dir = out.to_string_lossy().to_string();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn execute(cli: Cli) -> Result<(), PipelineError> {
    match cli.command {
        Command::All { common } => {
            let cfg = load_config(&common)?;
            let summary = pipeline::run(&cfg, &[])?;
            if let Some(wer) = summary.eval_wer {
                println!("eval WER: {wer:.2}%");
            }
        }
        Command::Run { stages, common } => {
            let cfg = load_config(&common)?;
            let summary = pipeline::run(&cfg, &stages)?;
            println!("ran stages: {}", summary.stages_run.join(", "));
            if let Some(wer) = summary.eval_wer {
                println!("eval WER: {wer:.2}%");
            }
        }
        Command::Matrix { common } => {
            let cfg = load_config(&common)?;
            if cfg.matrix.is_empty() {
                return Err(PipelineError::Validation(
                    "no [[matrix]] variants in the configuration".to_string(),
                ));
            }
            let report = pipeline::experiment_matrix(&cfg, &cfg.matrix)?;
            print!("{}", report.to_table());
        }
        Command::DefaultConfig => {
            print!("{}", ExperimentConfig::default().to_toml());
        }
        Command::Stages => {
            for s in STAGE_ORDER {
                println!("{s}");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
