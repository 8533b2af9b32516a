use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use iaflow_cli::{load_config, run, Command};

#[derive(Parser)]
#[command(
    name = "iaflow",
    version,
    about = "Train and verify inverse autoregressive flow VAEs"
)]
struct Cli {
    #[command(subcommand)]
    command: Sub,
}

#[derive(Args)]
struct Common {
    /// Flat `key = value` config file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Config overrides as `--key value` pairs
    #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Sub {
    /// Train a model; writes metrics.csv, eval.csv, ckpt.txt and samples
    Train(Common),
    /// Evaluate the checkpoint in the output directory
    Eval(Common),
    /// Decode prior draws from the checkpoint in the output directory
    Sample(Common),
    /// Fit diagonal and IAF posteriors to the four-point toy data
    Toy(Common),
    /// Run the oracle suites; exit status 0 iff all pass
    Check(Common),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (command, common) = match cli.command {
        Sub::Train(c) => (Command::Train, c),
        Sub::Eval(c) => (Command::Eval, c),
        Sub::Sample(c) => (Command::Sample, c),
        Sub::Toy(c) => (Command::Toy, c),
        Sub::Check(c) => (Command::Check, c),
    };
    let result = load_config(command, common.config.as_deref(), &common.overrides)
        .map_err(iaflow_cli::CliError::from)
        .and_then(|cfg| run(command, &cfg));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
