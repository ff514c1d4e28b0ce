use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mantis_core::config::ExperimentConfig;
use mantis_core::experiment::run_experiment;
use mantis_core::MantisError;

#[derive(Parser, Debug)]
#[command(name = "mantis-lab", version, about = "Synthetic point-cloud experiments for state-aware SSM adapters")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Debug)]
struct RunArgs {
    /// TOML experiment config.
    #[arg(long)]
    config: PathBuf,
    /// Dotted-key override, e.g. `train.epochs=5`; repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the synthetic dataset as JSON lines.
    Generate(RunArgs),
    /// Train and log per-epoch metrics.
    Train(RunArgs),
    /// Evaluate a checkpoint (or the untrained model) on the test split.
    Eval(RunArgs),
    /// Transfer-matrix, rank, deviation and parameter-count report.
    Analyze(RunArgs),
    /// One run per value of `ablate.axis`.
    Ablate(RunArgs),
    /// Forward wall-time against sequence length.
    Complexity(RunArgs),
}

impl Command {
    fn split(self) -> (&'static str, RunArgs) {
        match self {
            Command::Generate(a) => ("generate", a),
            Command::Train(a) => ("train", a),
            Command::Eval(a) => ("eval", a),
            Command::Analyze(a) => ("analyze", a),
            Command::Ablate(a) => ("ablate", a),
            Command::Complexity(a) => ("complexity", a),
        }
    }
}

fn exit_code(e: &MantisError) -> u8 {
    match e {
        MantisError::Config(_) | MantisError::Argument(_) | MantisError::Validation(_) => 2,
        MantisError::Numeric { .. } => 3,
        MantisError::Io(_) | MantisError::Format(_) => 4,
        MantisError::Internal(_) => 5,
    }
}

fn error_record(kind: &str, message: &str) -> String {
    serde_json::json!({ "status": "error", "error": { "kind": kind, "message": message } }).to_string()
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            eprintln!("{}", error_record("usage", e.to_string().trim()));
            return ExitCode::from(2);
        }
    };
    let (mode, args) = cli.command.split();
    // the subcommand decides the mode, whatever the file says
    let mut overrides = vec![format!("mode=\"{mode}\"")];
    overrides.extend(args.overrides);
    let result = ExperimentConfig::load(&args.config, &overrides).and_then(|cfg| run_experiment(&cfg));
    match result {
        Ok(report) => {
            let body = serde_json::json!({ "status": "ok", "report": report });
            println!("{body}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", error_record(e.kind(), &e.to_string()));
            ExitCode::from(exit_code(&e))
        }
    }
}
