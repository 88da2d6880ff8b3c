//! The `hvrnn` command-line tool: reproducible train, generate, evaluate,
//! ablate and make-data runs driven by one JSON config.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub mod commands;
pub mod config;

pub use config::{resolve, ConfigSources, RunConfig};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] hvrnn::Error),
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl CliError {
    /// 2 config, 3 numeric, 4 i/o or checkpoint, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(hvrnn::Error::Config { .. }) => 2,
            CliError::Core(hvrnn::Error::Numeric { .. }) => 3,
            CliError::Core(hvrnn::Error::Io { .. } | hvrnn::Error::Format { .. } | hvrnn::Error::Checkpoint(_)) => 4,
            CliError::Io { .. } => 4,
            CliError::Core(hvrnn::Error::Contract { .. }) => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "hvrnn", version, about = "Hierarchical VRNN video prediction lab")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON run config; omitted keys take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dotted override, e.g. `train.epochs=1` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct Source {
    /// Checkpoint directory (default: `<out>/checkpoint`).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Test sequences written by `make-data` (default: generated from the config).
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model; writes checkpoints, logs and the resolved config.
    Train(Common),
    /// Sample futures for one test sequence as PGM frames and strips.
    Generate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        source: Source,
        /// Samples to draw.
        #[arg(long)]
        n: Option<usize>,
        /// Frames to predict.
        #[arg(long)]
        horizon: Option<usize>,
    },
    /// Best-of-N metrics and per-channel KL activity on the test set.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        source: Source,
        /// Metric to compute (repeatable; default all).
        #[arg(long)]
        metric: Vec<String>,
        /// Samples per sequence.
        #[arg(long)]
        n: Option<usize>,
    },
    /// Train every cell of the ablation grid and tabulate ELBOs.
    Ablate(Common),
    /// Write the fixed test set as PGM sequence directories.
    MakeData(Common),
}

fn sources(c: &Common, extra: Vec<(String, serde_json::Value)>) -> Result<ConfigSources, CliError> {
    let mut overrides = c.set.iter().map(|s| config::parse_override(s)).collect::<Result<Vec<_>, _>>()?;
    overrides.extend(extra);
    if let Some(out) = &c.out {
        overrides.push(("out".into(), serde_json::json!(out)));
    }
    if let Some(seed) = c.seed {
        overrides.push(("seed".into(), serde_json::json!(seed)));
    }
    Ok(ConfigSources { file: c.config.clone(), overrides })
}

fn dispatch(cmd: &Command) -> Result<(), CliError> {
    use serde_json::json;
    match cmd {
        Command::Train(c) => commands::train(&resolve(&sources(c, vec![])?)?),
        Command::Generate { common, source, n, horizon } => {
            let mut extra = Vec::new();
            if let Some(n) = n {
                extra.push(("generate.n_samples".into(), json!(n)));
            }
            if let Some(h) = horizon {
                extra.push(("generate.horizon".into(), json!(h)));
            }
            let cfg = resolve(&sources(common, extra)?)?;
            commands::generate(&cfg, source.checkpoint.as_deref(), source.data.as_deref())
        }
        Command::Evaluate { common, source, metric, n } => {
            let mut extra = Vec::new();
            if !metric.is_empty() {
                let ms = metric.iter().map(|m| m.parse::<hvrnn::eval::Metric>()).collect::<Result<Vec<_>, _>>()?;
                extra.push(("eval.metrics".into(), json!(ms)));
            }
            if let Some(n) = n {
                extra.push(("eval.n_samples".into(), json!(n)));
            }
            let cfg = resolve(&sources(common, extra)?)?;
            commands::evaluate(&cfg, source.checkpoint.as_deref(), source.data.as_deref())
        }
        Command::Ablate(c) => commands::ablate(&resolve(&sources(c, vec![])?)?).map(|_| ()),
        Command::MakeData(c) => commands::make_data(&resolve(&sources(c, vec![])?)?),
    }
}

/// Parse arguments, run the command and return the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(&cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
