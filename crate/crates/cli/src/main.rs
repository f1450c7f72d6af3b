use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use srnmt_cli::{run, CliError, Command, RunConfig};

#[derive(Parser)]
#[command(name = "srnmt", version, about = "Train, evaluate and benchmark weakly-recurrent translation models")]
struct Cli {
    /// Configuration file of `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the `seed` key.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides one configuration key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand, Clone, Copy)]
enum Cmd {
    /// Two-stage training; writes the best checkpoint and the log.
    Train,
    /// Decodes `input` line by line.
    Translate,
    /// Validation perplexity and greedy exact-match of a checkpoint.
    EvalPpl,
    /// Finite-difference check of every parameter gradient.
    Gradcheck,
    /// SR versus LSTM layer throughput.
    Bench,
    /// Single-stage runs over all eight component combinations.
    Ablate,
    /// Writes a synthetic parallel corpus.
    Generate,
}

fn config(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?;
            RunConfig::from_text(&text)?
        }
        None => RunConfig::default(),
    };
    let overrides = cli
        .set
        .iter()
        .map(|kv| {
            kv.split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got {kv:?}")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    cfg.apply(overrides)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let command = match cli.command {
        Cmd::Train => Command::Train,
        Cmd::Translate => Command::Translate,
        Cmd::EvalPpl => Command::EvalPpl,
        Cmd::Gradcheck => Command::Gradcheck,
        Cmd::Bench => Command::Bench,
        Cmd::Ablate => Command::Ablate,
        Cmd::Generate => Command::Generate,
    };
    let result = config(&cli).and_then(|cfg| run(command, &cfg, &mut std::io::stdout().lock()));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
