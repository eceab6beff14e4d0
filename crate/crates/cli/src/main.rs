mod commands;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use cunet_core::Precision;

use error::CliError;

#[derive(Parser, Debug)]
#[command(name = "cunet", version, about = "Multi-modal convolutional sparse coding and its unrolled network")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// JSON experiment config. Missing sections take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Dotted-path override such as `model.k=8`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub set: Vec<String>,
    /// Seed for data generation, initialization and shuffling.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, value_parser = parse_precision, global = true)]
    pub precision: Option<Precision>,
}

fn parse_precision(s: &str) -> Result<Precision, String> {
    match s {
        "f32" => Ok(Precision::F32),
        "f64" => Ok(Precision::F64),
        _ => Err(format!("expected f32 or f64, got `{s}`")),
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset and export it as netpbm triples.
    SynthData,
    /// Train a model on the configured synthetic dataset.
    Train,
    /// Run a trained model on one input/guidance pair.
    Infer(commands::InferArgs),
    /// Score predictions against targets.
    Eval(commands::EvalArgs),
    /// Export the common and unique reconstructions of one forward pass.
    Decompose(commands::InferArgs),
    /// Check the unrolled network against ISTA and its gradients against finite differences.
    OracleCheck,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if e.use_stderr() => {
            let first = e.to_string().lines().next().unwrap_or_default().trim_start_matches("error: ").to_string();
            let err = CliError::new("E_USAGE", first);
            eprintln!("{err}");
            return ExitCode::from(err.exit_code() as u8);
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
    };
    let common = cli.common;
    let result = match cli.command {
        Command::SynthData => commands::synth_data(&common),
        Command::Train => commands::train(&common),
        Command::Infer(a) => commands::infer(&common, &a),
        Command::Eval(a) => commands::eval(&common, &a),
        Command::Decompose(a) => commands::decompose(&common, &a),
        Command::OracleCheck => commands::oracle_check(&common),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
