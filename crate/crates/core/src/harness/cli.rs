//! Command-line front end. Exit status: 0 when every assertion passes,
//! 1 when one fails (or a solve fails mid-run), 2 for usage, config and I/O errors.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde_json::Value;

use crate::error::Error;

use super::commands::{run_argmin, run_check_sub, run_minprin, run_prox, run_supconv, Outcome};
use super::config::{ExperimentConfig, OutputConfig};
use super::report::{ErrorRecord, ExperimentReport};

pub const EXIT_PASS: i32 = 0;
pub const EXIT_ASSERTION: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "semiconvex", version, about = "Marginal-function experiments for semiconvex fields")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Resolvent evaluations and contraction sweeps.
    Prox { config: PathBuf },
    /// Argmin, marginal and calmness scans on the base grid.
    Argmin { config: PathBuf },
    /// Partial sup-convolution property sweeps.
    Supconv { config: PathBuf },
    /// Jet membership of the configured field in F#P, plus positivity of F.
    CheckSub { config: PathBuf },
    /// The full minimum-principle pipeline.
    Minprin { config: PathBuf },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Prox { .. } => "prox",
            Command::Argmin { .. } => "argmin",
            Command::Supconv { .. } => "supconv",
            Command::CheckSub { .. } => "check-sub",
            Command::Minprin { .. } => "minprin",
        }
    }

    fn config(&self) -> &Path {
        match self {
            Command::Prox { config }
            | Command::Argmin { config }
            | Command::Supconv { config }
            | Command::CheckSub { config }
            | Command::Minprin { config } => config,
        }
    }

    fn execute(&self, cfg: &ExperimentConfig) -> crate::error::Result<Outcome> {
        match self {
            Command::Prox { .. } => run_prox(cfg),
            Command::Argmin { .. } => run_argmin(cfg),
            Command::Supconv { .. } => run_supconv(cfg),
            Command::CheckSub { .. } => run_check_sub(cfg),
            Command::Minprin { .. } => run_minprin(cfg),
        }
    }
}

/// Setup problems exit with 2; anything raised while the experiment runs is a failed check.
fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_)
        | Error::Io(_)
        | Error::UnknownSubequation(_)
        | Error::UnknownFamily(_)
        | Error::MissingCertificate(_)
        | Error::DimensionMismatch(_) => EXIT_CONFIG,
        _ => EXIT_ASSERTION,
    }
}

pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_PASS };
        }
    };
    let command = &cli.command;
    let path = command.config();
    let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();

    let cfg = match ExperimentConfig::load(path) {
        Ok(cfg) => cfg,
        Err(e) => {
            // no parsed output section: fall back to the default report path
            let (report_path, _) = OutputConfig::default().resolve(&base_dir);
            let mut report = ExperimentReport::new(command.name(), Value::Null);
            report.error = Some(ErrorRecord::from(&e));
            let _ = report.write(&report_path);
            eprintln!("error: {e}");
            return EXIT_CONFIG;
        }
    };
    let (report_path, points_path) = cfg.output.resolve(&base_dir);
    let mut report = ExperimentReport::new(command.name(), serde_json::to_value(&cfg).unwrap_or(Value::Null));

    let code = match command.execute(&cfg) {
        Ok(outcome) => {
            report.passed = outcome.assertions.iter().all(|a| a.passed);
            for a in outcome.assertions.iter().filter(|a| !a.passed) {
                eprintln!("assertion failed: {} (observed {}, expected {})", a.name, a.observed, a.expected);
            }
            report.summary = outcome.summary;
            report.assertions = outcome.assertions;
            if let Err(e) = outcome.table.write(&points_path) {
                report.passed = false;
                report.error = Some(ErrorRecord::from(&e));
                let _ = report.write(&report_path);
                eprintln!("error: {e}");
                return EXIT_CONFIG;
            }
            if report.passed {
                EXIT_PASS
            } else {
                EXIT_ASSERTION
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            report.error = Some(ErrorRecord::from(&e));
            exit_code(&e)
        }
    };
    if let Err(e) = report.write(&report_path) {
        eprintln!("error: {e}");
        return EXIT_CONFIG;
    }
    code
}
