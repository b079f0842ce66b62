use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use decsal::config::sha256_hex;
use decsal::pipeline::parse_method;
use decsal::{ExperimentConfig, HarnessError, Pipeline, Result, RunOptions};

#[derive(Parser)]
#[command(name = "decsal", version, about = "Decoded layer saliency for transformer text classifiers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Experiment config (TOML). Defaults apply when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed, overriding the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Artifact directory, overriding the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Layer to explain; repeat for several.
    #[arg(long = "layer", global = true)]
    layers: Vec<usize>,
    /// Saliency method: gradcam or simple.
    #[arg(long, global = true)]
    method: Option<String>,
    /// Contributors kept per output position.
    #[arg(long, global = true)]
    tau: Option<usize>,
    /// Top-k for the overlap stage.
    #[arg(long, global = true)]
    k: Option<usize>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Build the vocabulary from the training split.
    Vocab,
    /// Generate the synthetic dataset or ingest the configured file.
    Synth,
    /// Masked-LM pretraining.
    Pretrain,
    /// Classifier fine-tuning.
    Finetune,
    /// Saliency for every test input and explainer.
    Explain,
    /// Hiding and revealing games with AUCs.
    Game,
    /// Class token rankings and top-k overlap.
    Overlap,
    /// SVG curves and HTML highlights.
    Report,
    /// Every stage in order.
    Run,
}

fn configure(cli: &Cli) -> Result<(ExperimentConfig, Option<String>)> {
    let (mut cfg, file_hash) = match &cli.config {
        Some(path) => {
            let bytes = std::fs::read(path).map_err(|e| match e.kind() {
                std::io::ErrorKind::NotFound => HarnessError::Config(format!("{}: no such config file", path.display())),
                _ => HarnessError::io(path, e),
            })?;
            (ExperimentConfig::load(path)?, Some(sha256_hex(&bytes)))
        }
        None => (ExperimentConfig::default(), None),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    if !cli.layers.is_empty() {
        cfg.saliency.layers = cli.layers.clone();
    }
    if let Some(m) = &cli.method {
        cfg.saliency.methods = vec![parse_method(m)?];
    }
    if let Some(tau) = cli.tau {
        cfg.saliency.tau = Some(tau);
    }
    if let Some(k) = cli.k {
        cfg.evaluation.k = vec![k];
    }
    cfg.validate()?;
    Ok((cfg, file_hash))
}

fn execute(cli: &Cli) -> Result<()> {
    let (cfg, config_file_hash) = configure(cli)?;
    let mut p = Pipeline::new(
        cfg,
        RunOptions {
            threads: None,
            config_file_hash,
        },
    )?;
    match cli.command {
        Command::Synth => p.synth(),
        Command::Vocab => p.vocab(),
        Command::Pretrain => p.pretrain(),
        Command::Finetune => p.finetune(),
        Command::Explain => p.explain(),
        Command::Game => p.game().map(drop),
        Command::Overlap => p.overlap().map(drop),
        Command::Report => p.report(),
        Command::Run => p.run_all(),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("decsal: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
