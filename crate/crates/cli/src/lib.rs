//! Command-line front end for the `iaflow` library: configuration,
//! experiment orchestration and the oracle check suite.

pub mod checks;
pub mod config;
pub mod experiment;

use std::fmt;
use std::path::{Path, PathBuf};

use config::{ConfigError, RunConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    Train,
    Eval,
    Sample,
    Toy,
    Check,
}

#[derive(Debug)]
pub enum CliError {
    Config(ConfigError),
    Run(iaflow::Error),
    ChecksFailed(usize),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Run(_) | CliError::ChecksFailed(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(e) => write!(f, "{e}"),
            CliError::Run(e) => write!(f, "{e}"),
            CliError::ChecksFailed(n) => write!(f, "{n} check suite(s) failed"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e)
    }
}

impl From<iaflow::Error> for CliError {
    fn from(e: iaflow::Error) -> Self {
        CliError::Run(e)
    }
}

/// Parses the configuration for `command` from an optional file and
/// `--key value` arguments. `toy` always runs the toy experiment.
pub fn load_config(
    command: Command,
    file: Option<&Path>,
    args: &[String],
) -> Result<RunConfig, ConfigError> {
    let mut overrides = config::parse_overrides(args)?;
    if command == Command::Toy {
        overrides.insert(0, ("experiment".into(), "toy4".into()));
    }
    RunConfig::load(file, &overrides)
}

fn ckpt_path(cfg: &RunConfig) -> PathBuf {
    cfg.out.join("ckpt.txt")
}

/// Runs one subcommand, printing a short report to stdout.
pub fn run(command: Command, cfg: &RunConfig) -> Result<(), CliError> {
    match command {
        Command::Train => {
            let run = experiment::run_training(cfg)?;
            experiment::write_run(&cfg.out, cfg, &run)?;
            let e = &run.evaluation;
            println!(
                "trained {} epochs; test vlb {:.4} ± {:.4}, log p(x) ≈ {:.4} ± {:.4} ({} samples)",
                run.metrics.len(),
                e.vlb,
                e.vlb_se,
                e.logp_iwae,
                e.logp_iwae_se,
                e.iwae_samples
            );
            println!("wrote {}", cfg.out.display());
        }
        Command::Eval => {
            let e = experiment::evaluate_checkpoint(cfg, &ckpt_path(cfg))?;
            experiment::create_dir(&cfg.out)?;
            iaflow::csv::write_eval_csv(&cfg.out.join("eval.csv"), &e)?;
            println!("n = {}", e.n);
            println!("vlb        {:.6} ± {:.6}", e.vlb, e.vlb_se);
            println!(
                "log p(x) ≈ {:.6} ± {:.6} ({} samples)",
                e.logp_iwae, e.logp_iwae_se, e.iwae_samples
            );
        }
        Command::Sample => {
            let (store, vae, data) = experiment::load_model(cfg, &ckpt_path(cfg))?;
            experiment::create_dir(&cfg.out)?;
            experiment::write_prior_samples(&cfg.out, &vae, &store, cfg.seed, data.image_side)?;
            println!("wrote prior samples to {}", cfg.out.display());
        }
        Command::Toy => {
            let variants = experiment::run_toy(cfg, Some(&cfg.out))?;
            for v in &variants {
                println!(
                    "{:<9} final elbo {:.4} ± {:.4}  log p(x) ≈ {:.4}  W2 to prior {:.4}",
                    v.name, v.evaluation.vlb, v.evaluation.vlb_se, v.evaluation.logp_iwae, v.w2
                );
            }
            println!("wrote {}", cfg.out.display());
        }
        Command::Check => {
            let reports = checks::run_all()?;
            for r in &reports {
                println!("{r}");
            }
            let failed = reports.iter().filter(|r| !r.passed).count();
            println!("{} suites, {} failed", reports.len(), failed);
            if failed > 0 {
                return Err(CliError::ChecksFailed(failed));
            }
        }
    }
    Ok(())
}
