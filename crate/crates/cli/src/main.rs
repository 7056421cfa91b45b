//! Command-line runner for the hybrid explicit-implicit experiments.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use hei_core::experiment::{self, ExperimentConfig};
use hei_core::Error;

#[derive(Parser, Debug)]
#[command(name = "hei", version, about = "Multiscale splitting solver with a learned implicit part")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// JSON experiment configuration; defaults apply to missing fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the experiment seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Override a config field by dotted path, e.g. `time.n_steps=200`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,

    /// Replace the network by the exact splitting answers (testing aid).
    #[arg(long, global = true)]
    oracle_predictor: bool,

    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Print the effective configuration as JSON and exit.
    #[arg(long, global = true)]
    print_config: bool,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Splitting trajectory, fine reference and decomposition.
    Simulate,
    /// Fit the surrogate on the training prefix.
    Train,
    /// Hybrid rollout and error reports.
    Rollout,
    /// Coarse-solution assimilation with the observed robust part.
    Assimilate,
    /// Summarize results already in the output directory.
    Report,
}

fn load_config(cli: &Cli) -> hei_core::Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    for assignment in &cli.overrides {
        cfg.set(assignment)?;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.output = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> hei_core::Result<String> {
    let cfg = load_config(cli)?;
    if cli.print_config {
        return Ok(serde_json::to_string_pretty(&cfg)?);
    }
    log::info!("config {} -> {}", cfg.hash(), cfg.output.display());
    Ok(match cli.command {
        Command::Simulate => serde_json::to_string_pretty(&experiment::simulate(&cfg)?)?,
        Command::Train => serde_json::to_string_pretty(&experiment::train_models(&cfg)?)?,
        Command::Rollout => serde_json::to_string_pretty(&experiment::rollout(&cfg, cli.oracle_predictor)?)?,
        Command::Assimilate => experiment::assimilation_table(&experiment::assimilate(&cfg, cli.oracle_predictor)?),
        Command::Report => experiment::report(&cfg)?,
    })
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config { .. } => 2,
        e if e.is_numeric() => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(text) => {
            println!("{text}");
            ExitCode::SUCCESS
        }
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}
