//! Command-line front end: `train`, `eval`, `profile`, `cascade` and
//! `select`.
//!
//! Tables go to stdout as CSV with a leading `# config_hash=<hash>` line;
//! structured results are single JSON documents carrying a `config_hash`
//! field. Failures print one JSON line `{"error": kind, "message": ...}` to
//! stderr and exit nonzero.

mod commands;
mod format;

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};

pub use format::{cascade_csv, cost_csv, eval_csv, parse_csv_table};

#[derive(Debug, Parser)]
#[command(name = "supervit", version, about = "Multi-granularity vision-transformer supernet")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Backbone {
    DeitS,
    DeitT,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the supernet; writes metrics.jsonl and checkpoints to the
    /// configured output directory.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Validation accuracy of one subnet or all of them.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Grid side, e.g. 8 for an 8x8 grid.
        #[arg(long, requires = "rate", conflicts_with = "all")]
        grid: Option<usize>,
        #[arg(long, requires = "grid", conflicts_with = "all")]
        rate: Option<f64>,
        #[arg(long)]
        all: bool,
        /// Also write the accuracy/cost table as JSON for `select`.
        #[arg(long)]
        tables_out: Option<PathBuf>,
    },
    /// Analytic MAC counts per subnet, optionally with measured throughput.
    Profile {
        #[arg(long, required_unless_present = "paper_dims")]
        config: Option<PathBuf>,
        /// Use full-size backbone dimensions (224 px input, 1000 classes).
        #[arg(long)]
        paper_dims: bool,
        #[arg(long, value_enum, default_value = "deit-s", requires = "paper_dims")]
        backbone: Backbone,
        /// Override the 1-indexed drop blocks, e.g. `3,6,9`.
        #[arg(long, value_delimiter = ',')]
        drop_blocks: Option<Vec<usize>>,
        /// CSV `grid,rate,gmacs,img_per_s` instead of JSON reports.
        #[arg(long)]
        table: bool,
        /// Timed forward passes per subnet; 0 skips throughput.
        #[arg(long, default_value_t = 0)]
        bench_repeats: usize,
        #[arg(long, default_value_t = 8)]
        bench_batch: usize,
    },
    /// Early-exit cascade accuracy/cost curve over confidence thresholds.
    Cascade {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Ascending thresholds in [0, 1], e.g. `0,0.5,0.9,1`.
        #[arg(long, value_delimiter = ',', required = true)]
        sweep: Vec<f64>,
        /// Stages cheapest first, e.g. `4x4@0.5,8x8@0.7`; defaults to the
        /// smallest subnet then the finest grid at the second rate.
        #[arg(long, value_delimiter = ',')]
        stages: Option<Vec<String>>,
    },
    /// Most accurate subnet within a budget, from an `eval --tables-out`
    /// file.
    Select {
        /// Budget in units of 10^9 MACs.
        #[arg(long)]
        budget: f64,
        #[arg(long)]
        tables: PathBuf,
    },
}

#[derive(Debug)]
pub enum CliError {
    /// `--help` or `--version` text; not a failure.
    Help(String),
    Usage(String),
    Run(supervit::Error),
    Output(std::io::Error),
}

impl From<supervit::Error> for CliError {
    fn from(e: supervit::Error) -> Self {
        CliError::Run(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Output(e)
    }
}

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Help(_) => "help",
            CliError::Usage(_) => "usage",
            CliError::Run(e) => e.kind(),
            CliError::Output(_) => "io",
        }
    }

    pub fn message(&self) -> String {
        match self {
            CliError::Help(s) | CliError::Usage(s) => s.trim().to_string(),
            CliError::Run(e) => e.to_string(),
            CliError::Output(e) => e.to_string(),
        }
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Help(_) => 0,
            CliError::Usage(_) => 2,
            _ => 1,
        }
    }

    /// `{"error": kind, "message": text}` on one line.
    pub fn to_json_line(&self) -> String {
        let message: String = self.message().lines().collect::<Vec<_>>().join(" ");
        serde_json::json!({ "error": self.kind(), "message": message }).to_string()
    }
}

/// Parses `args` (program name first) and runs the command, writing its
/// output to `out`.
pub fn run<I, T>(args: I, out: &mut dyn Write) -> Result<(), CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| match e.kind() {
        clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => CliError::Help(e.to_string()),
        _ => CliError::Usage(e.to_string()),
    })?;
    commands::dispatch(cli.command, out)
}
