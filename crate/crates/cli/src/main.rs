mod commands;
mod config;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Command {
    /// Parse and split the dataset, write split.manifest.
    Ingest,
    /// Train one model, write checkpoint.bin and loss.csv.
    Train,
    /// Evaluate checkpoint.bin on the test partition, write metrics.csv.
    Eval,
    /// Train and evaluate the four ablation variants, write metrics.csv.
    Ablate,
    /// Training throughput per sequence length, write bench.csv.
    Bench,
    /// Polynomial degree oracle and scaling table, write analysis.csv.
    Analyze,
    /// Whole-model gradient check, write gradcheck.txt.
    Gradcheck,
}

/// Sequential recommendation with multi-channel attention.
#[derive(Debug, Parser)]
#[command(name = "fuxi", version)]
struct Cli {
    command: Command,
    /// TOML run configuration; defaults apply to every missing key.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Dotted override applied after the file, e.g. `model.b=4`.
    #[arg(short = 's', long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run::execute(cli.command, cli.config.as_deref(), &cli.overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("{}", err.record());
            ExitCode::from(err.exit_code())
        }
    }
}
