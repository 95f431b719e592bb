//! Library half of the `lipdistill` binary: argument handling and the
//! subcommands, kept here so they can be tested without a process.

pub mod commands;
pub mod config;

use std::fmt;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::Value;

pub use config::RunConfig;

/// Exit status 1 for bad input, 2 for failures while running.
#[derive(Debug)]
pub enum CliError {
    Validation(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Validation(m) => write!(f, "invalid input: {m}"),
            CliError::Runtime(m) => write!(f, "error: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<lipdistill::TensorError> for CliError {
    fn from(e: lipdistill::TensorError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "lipdistill",
    version,
    about = "Audio-to-visual knowledge distillation for word-level lipreading",
    after_help = "Any config key can be overridden with --<section>.<key> <value>, e.g. --train.epochs 5"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// JSON file of flat dotted keys.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output root (default: $LIPDISTILL_OUT, else ./lipdistill-out).
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Default)]
pub struct DataSource {
    /// Load a dumped dataset instead of generating one from data.*.
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum RoleArg {
    Teacher,
    Student,
}

#[derive(Args, Debug, Clone, Default)]
pub struct TrainFlags {
    #[arg(long)]
    pub kd1: bool,
    #[arg(long)]
    pub kd2: bool,
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long)]
    pub mixup: bool,
    #[arg(long)]
    pub no_word_isolation: bool,
    #[arg(long)]
    pub no_spec_augment: bool,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Materialize the synthetic dataset and print its manifest path.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train the audio teacher or the visual student.
    Train {
        role: RoleArg,
        /// Teacher checkpoint directory (student only).
        #[arg(long)]
        teacher: Option<PathBuf>,
        #[command(flatten)]
        flags: TrainFlags,
        #[command(flatten)]
        data: DataSource,
        #[command(flatten)]
        common: Common,
    },
    /// Baseline / +KD1 / +KD1+KD2 (σ=3) / +KD1+KD2 (σ=2) over seeds.
    Ablation {
        /// Shared teacher checkpoint; one is trained per seed otherwise.
        #[arg(long)]
        teacher: Option<PathBuf>,
        /// Comma-separated seeds, overriding ablation.seeds.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[command(flatten)]
        data: DataSource,
        #[command(flatten)]
        common: Common,
    },
    /// Test-split Top-1 of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataSource,
        #[command(flatten)]
        common: Common,
    },
    /// Finite-difference check of every layer and loss.
    Gradcheck {
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        /// Test hook: perturb this component's analytic gradient.
        #[arg(long, hide = true)]
        corrupt: Option<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Dump the audio-to-visual alignment map as CSV.
    InspectAlign {
        /// Audio frames (default data.audio_frames).
        #[arg(long)]
        ta: Option<usize>,
        /// Visual frames (default data.visual_frames).
        #[arg(long)]
        j: Option<usize>,
        #[arg(long)]
        sigma: Option<f64>,
        #[arg(long)]
        window: Option<usize>,
        /// CSV path (default <out>/align.csv).
        #[arg(long)]
        csv: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
}

/// `(key, value)` pairs from dotted flags, in command-line order.
pub type Overrides = Vec<(String, Value)>;

/// Pull `--a.b value` and `--a.b=value` pairs out of `args`, leaving the rest
/// for clap. A dotted flag name is what marks a config override.
pub fn split_overrides(args: &[String]) -> Result<(Vec<String>, Overrides), CliError> {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    let mut it = args.iter();
    while let Some(a) = it.next() {
        let Some(name) = a.strip_prefix("--").filter(|n| n.split('=').next().unwrap_or("").contains('.')) else {
            rest.push(a.clone());
            continue;
        };
        let (key, raw) = match name.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                let v = it
                    .next()
                    .ok_or_else(|| CliError::Validation(format!("--{name} needs a value")))?;
                (name.to_string(), v.clone())
            }
        };
        overrides.push((key, config::parse_flag_value(&raw)));
    }
    Ok((rest, overrides))
}

/// Parse and run; returns the process exit code.
pub fn run(args: &[String]) -> i32 {
    let (rest, overrides) = match split_overrides(args) {
        Ok(x) => x,
        Err(e) => {
            eprintln!("{e}");
            return e.exit_code();
        }
    };
    let cli = match Cli::try_parse_from(&rest) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match commands::dispatch(cli.command, &overrides) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}
