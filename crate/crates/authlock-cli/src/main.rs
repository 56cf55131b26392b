//! `authlock`: train fingerprint-locked classifiers, attack them, and
//! certify the noise-hardened ones.

mod commands;
mod config;
mod data;
mod rundir;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use authlock::Error;

use crate::commands::attack::Mode;
use crate::config::RunConfig;

#[derive(Parser)]
#[command(name = "authlock", version, about = "Hardware-locked classifier toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigSource {
    /// TOML config file; replaces the profile entirely.
    #[arg(long, conflicts_with = "profile")]
    config: Option<PathBuf>,
    /// Built-in settings: "desk" or "paper".
    #[arg(long, default_value = "desk")]
    profile: String,
    /// Directory that holds run directories.
    #[arg(long, default_value = "runs")]
    run_dir: PathBuf,
    /// Run name inside --run-dir; defaults to the config's run_id.
    #[arg(long)]
    run_id: Option<String>,
    /// Overwrite an existing run of the same name.
    #[arg(long)]
    force: bool,
}

impl ConfigSource {
    fn resolve(&self) -> Result<RunConfig, Error> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::from_profile(&self.profile)?,
        };
        if let Some(id) = &self.run_id {
            cfg.run_id = id.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a locked model and create a run directory.
    Implant {
        #[command(flatten)]
        source: ConfigSource,
        /// Override the training seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the training noise level.
        #[arg(long)]
        sigma: Option<f64>,
    },
    /// Run a trigger-recovery or finetuning attack against a stored run.
    Attack {
        /// Run directory created by implant.
        #[arg(long)]
        run: PathBuf,
        #[arg(long, value_enum)]
        mode: Mode,
        /// Target class for nc and pixel modes. Omitting it sweeps every
        /// class (nc) or optimizes toward true labels (pixel).
        #[arg(long)]
        target: Option<usize>,
        /// Override the configured step budget.
        #[arg(long)]
        steps: Option<usize>,
        /// Override the configured attack seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Certify a stored run under Gaussian noise.
    Certify {
        #[arg(long)]
        run: PathBuf,
        /// Override the certification noise level.
        #[arg(long)]
        sigma: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Render the accumulated metrics of a run as Markdown and CSV.
    Report {
        #[arg(long)]
        run: PathBuf,
    },
    /// Train and evaluate one model per noise level.
    AblateSigma {
        #[command(flatten)]
        source: ConfigSource,
        /// Comma-separated noise levels, e.g. 0,0.25,0.5,1.0.
        #[arg(long, value_delimiter = ',', required = true)]
        sigmas: Vec<f64>,
    },
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Implant { source, seed, sigma } => {
            let mut cfg = source.resolve()?;
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            if let Some(s) = sigma {
                cfg.train.sigma = s;
            }
            cfg.validate()?;
            commands::implant::run(&cfg, &source.run_dir, source.force)
        }
        Command::Attack { run, mode, target, steps, seed } => {
            commands::attack::run(&run, mode, target, steps, seed)
        }
        Command::Certify { run, sigma, seed } => commands::certify::run(&run, sigma, seed),
        Command::Report { run } => commands::report::run(&run),
        Command::AblateSigma { source, sigmas } => {
            let cfg = source.resolve()?;
            commands::ablate::run(&cfg, &source.run_dir, &sigmas, source.force)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ (Error::InvalidArgument(_) | Error::DataFormat(_))) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
