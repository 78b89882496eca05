//! Command-line front end: configuration parsing, seeded experiment runs,
//! run-directory artifacts and their summaries.

pub mod artifacts;
pub mod commands;
pub mod config;
pub mod error;

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Parser, Subcommand};
use driftbench_core::gradcheck::SuiteSettings;
use driftbench_core::trainer::MethodKind;

pub use config::{ExperimentConfig, Overrides};
pub use error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "driftbench", version, about = "Domain-incremental continual learning runs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one run per seed and write its artifacts.
    Run {
        /// TOML experiment file; every key is optional.
        #[arg(long)]
        config: Option<PathBuf>,
        /// dare, dare++, er, derpp, sgd or joint.
        #[arg(long)]
        method: Option<MethodKind>,
        #[arg(long)]
        buffer_size: Option<usize>,
        /// Repeatable; replaces the file's seed list.
        #[arg(long = "seed")]
        seeds: Vec<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Summarize completed runs per method.
    Compare {
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
        /// Sort key: last_accuracy or bwt.
        #[arg(long, default_value = "last_accuracy")]
        metric: commands::CompareMetric,
        /// Where to write the summary CSV.
        #[arg(long, default_value = "compare_summary.csv")]
        summary: PathBuf,
    },
    /// Print epoch-of-origin and per-task counts of a buffer snapshot.
    InspectBuffer {
        snapshot: PathBuf,
        /// Counts CSV; defaults to `<snapshot>.counts.csv`.
        #[arg(long)]
        counts: Option<PathBuf>,
    },
    /// Finite-difference check of every training objective.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

pub fn execute(cli: Cli, out: &mut dyn Write) -> CliResult<()> {
    match cli.command {
        Command::Run {
            config,
            method,
            buffer_size,
            seeds,
            out: dir,
        } => {
            let overrides = Overrides {
                method,
                buffer_size,
                seeds,
                out: dir,
            };
            let cfg = match config {
                Some(path) => ExperimentConfig::from_file(&path, &overrides)?,
                None => ExperimentConfig::from_toml("", &overrides)?,
            };
            commands::run(&cfg, out).map(|_| ())
        }
        Command::Compare {
            dirs,
            metric,
            summary,
        } => commands::compare(&dirs, metric, &summary, out).map(|_| ()),
        Command::InspectBuffer { snapshot, counts } => {
            let counts = counts.unwrap_or_else(|| commands::default_counts_path(&snapshot));
            commands::inspect_buffer(&snapshot, &counts, out).map(|_| ())
        }
        Command::Gradcheck { seed } => {
            let settings = SuiteSettings {
                seed,
                ..Default::default()
            };
            commands::gradcheck(&settings, out).map(|_| ())
        }
    }
}

/// Parses `args`, runs the command and returns the process exit status.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let stdout = std::io::stdout();
    match execute(cli, &mut stdout.lock()) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("driftbench: {e}");
            e.exit_code()
        }
    }
}
