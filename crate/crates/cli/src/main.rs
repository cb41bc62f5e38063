use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use kmc_cli::config::{ExperimentConfig, ExperimentKind};
use kmc_cli::runs::{effective_config, run, RunError};

/// Desk-scale experiments for kernelized matrix costs.
///
/// Exit status is 0 on success, 1 when a check fails, training diverges or a
/// computation errors out, and 2 for usage and configuration errors.
#[derive(Parser, Debug)]
#[command(name = "kmc", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML configuration file; missing keys take their defaults.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Seed for every random draw of the run (overrides the file).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory for the result files (overrides the file).
    #[arg(long, global = true, value_name = "DIR")]
    output_dir: Option<PathBuf>,
    /// Print the effective configuration as TOML and exit.
    #[arg(long, global = true)]
    print_config: bool,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Every cost against a shifted copy of the data density.
    Sweep,
    /// Train the noise-to-centers network on a toy dataset.
    FitMdn,
    /// Identity-map approximation matrices for a list of shifts.
    IdentityMap,
    /// Left and right singular functions on a 2D grid.
    SingularGrid,
    /// Train the patch classifier on IDX or CIFAR files.
    Classify,
    /// Run every invariant check and write a report.
    CheckSuite,
}

impl Command {
    fn kind(self) -> ExperimentKind {
        match self {
            Command::Sweep => ExperimentKind::Sweep,
            Command::FitMdn => ExperimentKind::FitMdn,
            Command::IdentityMap => ExperimentKind::IdentityMap,
            Command::SingularGrid => ExperimentKind::SingularGrid,
            Command::Classify => ExperimentKind::Classify,
            Command::CheckSuite => ExperimentKind::CheckSuite,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let mut cfg = match &cli.config {
        Some(p) => match ExperimentConfig::load(p) {
            Ok(c) => c,
            Err(e) => {
                eprintln!("error: {e}");
                return ExitCode::from(2);
            }
        },
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(d) = &cli.output_dir {
        cfg.output_dir = d.clone();
    }
    let result = effective_config(cfg, cli.command.kind()).and_then(|cfg| {
        if cli.print_config {
            print!("{}", cfg.to_toml());
            return Ok(None);
        }
        run(&cfg).map(|out| Some((out, cfg.output_dir)))
    });
    match result {
        Ok(None) => ExitCode::SUCCESS,
        Ok(Some((out, dir))) => {
            println!("{}: {}", out.manifest.experiment, out.summary);
            println!("results in {}", dir.display());
            if out.ok {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Err(RunError::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(RunError::Failed(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}
