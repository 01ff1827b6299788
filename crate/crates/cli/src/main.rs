//! `stepchain` command-line interface.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or engine error.

mod commands;
mod server;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "stepchain",
    version,
    about = "Step-indexed reasoning over skill and experience libraries with test-time adaptation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Ingest JSONL libraries, freeze them, and write a snapshot directory.
    Build(BuildArgs),
    /// Answer a single question from a snapshot; prints the evidence bundle.
    Run(RunArgs),
    /// Run a benchmark file and print a JSON report (summary on stderr).
    Eval(EvalArgs),
    /// Train the feature reranker from a triplets file.
    TrainReranker(TrainArgs),
    /// Re-run the faithfulness checks on a sample of the experience library.
    Audit(AuditArgs),
    /// Search one library the way the service endpoints do.
    Search(SearchArgs),
    /// Print snapshot health (library sizes, config hash).
    Info(InfoArgs),
    /// Serve the engine over HTTP.
    Serve(ServeArgs),
}

#[derive(Args)]
pub struct BuildArgs {
    /// Experience JSONL file.
    #[arg(long)]
    experience: PathBuf,
    /// Skills JSONL file.
    #[arg(long)]
    skills: PathBuf,
    /// Flat key = value config file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Trained reranker weights to bundle into the snapshot.
    #[arg(long)]
    reranker: Option<PathBuf>,
    /// Snapshot output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
pub struct RunArgs {
    #[arg(long)]
    snapshot: PathBuf,
    #[arg(long)]
    question: String,
    #[arg(long, default_value = "")]
    context: String,
    /// Multiple-choice options as a JSON object, e.g. '{"A": "...", "B": "..."}'.
    #[arg(long)]
    options: Option<String>,
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    snapshot: PathBuf,
    #[arg(long)]
    benchmark: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Run the standard component-mask ablation instead of the full config only.
    #[arg(long)]
    ablation: bool,
    /// Include mean wall-time columns (makes reports non-reproducible).
    #[arg(long)]
    timings: bool,
    /// Include per-query evidence bundles in the report.
    #[arg(long)]
    bundles: bool,
}

#[derive(Args)]
pub struct TrainArgs {
    #[arg(long)]
    triplets: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 300)]
    epochs: usize,
    #[arg(long, default_value_t = 0.1)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
pub struct AuditArgs {
    #[arg(long)]
    snapshot: PathBuf,
    /// Sample size; the whole library when omitted.
    #[arg(long)]
    sample: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
pub struct SearchArgs {
    #[arg(long)]
    snapshot: PathBuf,
    /// Which library to search.
    #[arg(long, value_parser = ["skills", "experience"])]
    kind: String,
    #[arg(long)]
    query: String,
    /// Result count; defaults to the config's k (skills) or m (experience).
    #[arg(long)]
    limit: Option<usize>,
}

#[derive(Args)]
pub struct InfoArgs {
    #[arg(long)]
    snapshot: PathBuf,
}

#[derive(Args)]
pub struct ServeArgs {
    #[arg(long)]
    snapshot: PathBuf,
    /// Bind address; port 0 picks an ephemeral port (printed on startup).
    #[arg(long, default_value = "127.0.0.1:8080")]
    addr: String,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            let code = match err.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = err.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Build(args) => commands::build(args),
        Command::Run(args) => commands::run(args),
        Command::Eval(args) => commands::eval(args),
        Command::TrainReranker(args) => commands::train_reranker(args),
        Command::Audit(args) => commands::audit(args),
        Command::Search(args) => commands::search(args),
        Command::Info(args) => commands::info(args),
        Command::Serve(args) => server::serve(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(2)
        }
    }
}
