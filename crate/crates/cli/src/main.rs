//! `trico`: train, evaluate and diagnose co-training runs.
//!
//! Exit codes: 0 on success, 1 on a failed check or runtime error, 2 on a
//! configuration or usage error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::{parse_config, parse_flags, ConfigError};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
    #[error("check failed: {0}")]
    Failed(String),
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<trico_core::Error> for CliError {
    fn from(e: trico_core::Error) -> Self {
        match e {
            trico_core::Error::InvalidInput(msg) => CliError::Config(msg),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) | CliError::Failed(_) => 1,
        }
    }
}

#[derive(Parser)]
#[command(name = "trico", version, about = "Triadic co-training on paired embedding views")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Config file of `section.key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides as `--section.key value`; `--out <dir>` sets output.dir.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "OVERRIDES")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train over the seed list and write reports, curves and models.
    Train(Common),
    /// Evaluate a saved model on the test split.
    Eval {
        #[arg(long)]
        model: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Nash and Stackelberg diagnostics for a finished run directory.
    Equilibrium {
        #[arg(long)]
        run: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Finite-difference checks of every analytic gradient.
    Gradcheck(Common),
    /// Write the synthetic dataset as binary files.
    SynthData(Common),
    /// Per-step operation counts of a short run.
    Cost(Common),
}

/// Config plus the path-valued flags, which may appear among the overrides.
struct Loaded {
    cfg: config::RunConfig,
    model: Option<PathBuf>,
    run: Option<PathBuf>,
    out_given: bool,
}

fn load(common: &Common, model: Option<PathBuf>, run: Option<PathBuf>) -> Result<Loaded, CliError> {
    let mut flags = parse_flags(&common.overrides)?;
    let mut take = |key: &str| {
        let pos = flags.iter().rposition(|(k, _)| k == key)?;
        Some(PathBuf::from(flags.remove(pos).1))
    };
    let config = take("config").or(common.config.clone());
    let model = take("model").or(model);
    let run = take("run").or(run);
    let out_given = flags.iter().any(|(k, _)| k == "out" || k == "output.dir");
    let config = config.or_else(|| run.as_ref().map(|r| r.join("resolved.conf")));
    Ok(Loaded {
        cfg: parse_config(config.as_deref(), &flags)?,
        model,
        run,
        out_given,
    })
}

fn required(path: Option<PathBuf>, flag: &str) -> Result<PathBuf, CliError> {
    path.ok_or_else(|| CliError::Config(format!("--{flag} <path> is required")))
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train(c) => commands::train(&load(&c, None, None)?.cfg),
        Command::Eval { model, common } => {
            let l = load(&common, model, None)?;
            commands::eval(&l.cfg, &required(l.model, "model")?)
        }
        Command::Equilibrium { run, common } => {
            let mut l = load(&common, None, run)?;
            let run = required(l.run, "run")?;
            if !l.out_given {
                l.cfg.out = run.clone();
            }
            commands::equilibrium(&l.cfg, &run)
        }
        Command::Gradcheck(c) => {
            if commands::gradcheck(&load(&c, None, None)?.cfg)? {
                Ok(())
            } else {
                Err(CliError::Failed("gradient check exceeded tolerance".into()))
            }
        }
        Command::SynthData(c) => commands::synth_data(&load(&c, None, None)?.cfg),
        Command::Cost(c) => commands::cost(&load(&c, None, None)?.cfg),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("trico: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
