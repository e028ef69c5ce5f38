//! Pipeline CLI: train concept tokens, score and select demonstrations,
//! generate candidates, and evaluate them against sandboxed tests.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use demosel::backend::stub::{StubConfig, StubDist};
use demosel::backend::tokenizer::DEFAULT_ALPHABET;
use demosel::pipeline::{BackendConfig, ExperimentConfig, PipelineError, RunContext};

#[derive(Parser)]
#[command(
    name = "demosel",
    version,
    about = "Concept-token demonstration selection and code-generation evaluation"
)]
struct Cli {
    /// Experiment config (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Run directory; created (runs/<timestamp>-<digest>) when omitted.
    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,

    /// Override the config's master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Override the backend kind: tiny | stub.
    #[arg(long, global = true)]
    backend: Option<String>,

    /// Override the selection strategy: latent | semantic | random | all.
    #[arg(long, global = true)]
    strategy: Option<String>,

    /// Override the selection depth k.
    #[arg(long, global = true)]
    k: Option<usize>,

    /// Override the number of samples generated per query.
    #[arg(long, global = true)]
    n: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train concept-token embeddings, one checkpoint per configured task.
    Train,
    /// Score every (concept, demonstration) pair into scores.jsonl.
    Score,
    /// Write per-query selection files for the requested strategies.
    Select,
    /// Assemble few-shot prompts and sample candidates into samples.jsonl.
    Generate,
    /// Execute candidates in the sandbox and aggregate metric reports.
    Evaluate,
    /// Render the comparison table from the persisted report.
    Report,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    let config_path = cli
        .config
        .ok_or_else(|| PipelineError::Config("--config <path> is required".into()))?;
    let text = std::fs::read_to_string(&config_path).map_err(|source| PipelineError::Io {
        path: config_path.display().to_string(),
        source,
    })?;
    let mut config = ExperimentConfig::from_json(&text)?;

    if let Some(seed) = cli.seed {
        config.master_seed = seed;
    }
    if let Some(n) = cli.n {
        config.n_samples = n;
    }
    if let Some(k) = cli.k {
        config.selection.k = k;
    }
    if let Some(strategy) = &cli.strategy {
        config.selection.strategy = strategy.parse().map_err(PipelineError::Config)?;
    }
    if let Some(backend) = &cli.backend {
        config.backend = match backend.as_str() {
            "tiny" => BackendConfig::Tiny {
                model: Default::default(),
                pretrain: None,
            },
            "stub" => BackendConfig::Stub {
                config: StubConfig {
                    alphabet: Some(DEFAULT_ALPHABET.into()),
                    vocab_size: None,
                    embedding_dim: 8,
                    context_budget: 2048,
                    rules: vec![],
                    default: StubDist::uniform(),
                    seed: 0,
                },
            },
            other => {
                return Err(PipelineError::Config(format!(
                    "unknown backend {other:?} (expected tiny or stub)"
                )))
            }
        };
    }

    let ctx = RunContext::prepare(config, cli.run_dir)?;
    println!("run dir: {}", ctx.run_dir.display());

    match cli.command {
        Command::Train => {
            let paths = ctx.cmd_train()?;
            for path in paths {
                println!("checkpoint: {}", path.display());
            }
        }
        Command::Score => {
            let (hits, misses) = ctx.cmd_score()?;
            println!("scores: {hits} cache hits, {misses} computed");
        }
        Command::Select => {
            let paths = ctx.cmd_select()?;
            println!("wrote {} selection files", paths.len());
        }
        Command::Generate => {
            let path = ctx.cmd_generate()?;
            println!("samples: {}", path.display());
        }
        Command::Evaluate => {
            ctx.cmd_evaluate()?;
            let table = ctx.cmd_report()?;
            println!("{table}");
        }
        Command::Report => {
            let table = ctx.cmd_report()?;
            println!("{table}");
        }
    }
    Ok(())
}
