//! `utg`: ingest data, train models, generate and sweep rare samples, serve
//! the exploration API, export results.

mod config;
mod data;
mod generate;
mod serve;
mod train;

use std::io::{IsTerminal, Write};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "utg", version, about = "Generate rare, likely-unsupposable samples from trained generative models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a dataset and print a summary.
    Ingest(data::IngestArgs),
    /// Train a model.
    Train {
        #[command(subcommand)]
        kind: train::TrainKind,
    },
    /// Generate a batch of samples at one rarity setting.
    Generate(generate::GenerateArgs),
    /// Generate across a grid of rarity settings.
    Sweep(generate::SweepArgs),
    /// Serve the session API.
    Serve(serve::ServeArgs),
    /// Convert records to JSONL, CSV or PNG.
    Export(data::ExportArgs),
    /// Write a synthetic dataset.
    Synth {
        #[command(subcommand)]
        kind: data::SynthKind,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            // Usage errors share exit code 1 with load errors; 2 is reserved
            // for training divergence.
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let default_level = if matches!(cli.command, Command::Serve(_)) { "info" } else { "warn" };
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new(default_level)),
        )
        .with_writer(std::io::stderr)
        .with_ansi(std::io::stderr().is_terminal())
        .init();

    let result = match cli.command {
        Command::Ingest(a) => data::run_ingest(a),
        Command::Train { kind } => train::run(kind),
        Command::Generate(a) => generate::run_generate(a),
        Command::Sweep(a) => generate::run_sweep(a),
        Command::Serve(a) => serve::run_serve(a),
        Command::Export(a) => data::run_export(a),
        Command::Synth { kind } => data::run_synth(kind),
    };
    let _ = std::io::stdout().flush();
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code)
        }
    }
}
