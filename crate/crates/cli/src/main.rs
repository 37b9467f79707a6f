//! Command-line entry point.
//!
//! Exit codes: 0 on success, 1 for configuration or data validation
//! errors, 2 for numerical failures inside an operation.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use tubetest_cli::config::parse_config;
use tubetest_cli::data::ingest_csv;
use tubetest_cli::report::write_report;
use tubetest_cli::run::{dispatch, CliError};

#[derive(Parser)]
#[command(name = "tubetest", version, about = "Perturbation tests with tube-based calibration")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the test on a dataset
    Test {
        /// Configuration file
        config: PathBuf,
        /// CSV data file with header x1,..,xs
        data: PathBuf,
    },
    /// Estimate the number of components sequentially
    Build {
        config: PathBuf,
        data: PathBuf,
    },
    /// Geometric constants of the configured null
    Constants { config: PathBuf },
    /// Tail approximation at the configured thresholds
    Tail { config: PathBuf },
    /// Critical value at the configured level
    Critical { config: PathBuf },
    /// Monte Carlo check of the tail approximation
    Oracle { config: PathBuf },
    /// Rejection-rate experiments over a model grid
    Simulate { config: PathBuf },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprint!("{e}");
            return ExitCode::from(1);
        }
    };

    let (name, config_path, data_path) = match &cli.command {
        Command::Test { config, data } => ("test", config, Some(data)),
        Command::Build { config, data } => ("build", config, Some(data)),
        Command::Constants { config } => ("constants", config, None),
        Command::Tail { config } => ("tail", config, None),
        Command::Critical { config } => ("critical", config, None),
        Command::Oracle { config } => ("oracle", config, None),
        Command::Simulate { config } => ("simulate", config, None),
    };

    let text = match std::fs::read_to_string(config_path) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: reading {}: {e}", config_path.display());
            return ExitCode::from(1);
        }
    };
    let config = match parse_config(&text) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {}: {e}", config_path.display());
            return ExitCode::from(1);
        }
    };
    let data = match data_path {
        Some(path) => match ingest_csv(path) {
            Ok(d) => Some(d),
            Err(e) => {
                eprintln!("error: {}: {e}", path.display());
                return ExitCode::from(1);
            }
        },
        None => None,
    };

    let report = match dispatch(name, &config, data.as_ref()) {
        Ok(r) => r,
        Err(CliError::Validation(m)) => {
            eprintln!("error: {m}");
            return ExitCode::from(1);
        }
        Err(CliError::Numerical(m)) => {
            eprintln!("error: numerical failure: {m}");
            return ExitCode::from(2);
        }
    };

    let out = PathBuf::from(&config.output.path);
    if let Err(e) = write_report(&report, &out) {
        eprintln!("error: writing {}: {e}", out.display());
        return ExitCode::from(1);
    }
    println!("{}", out.display());
    ExitCode::SUCCESS
}
