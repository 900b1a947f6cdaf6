//! The `pam` command line: dataset synthesis, training, allocation, the
//! codec and the evaluation sweeps, driven by one resolved config.

pub mod artifacts;
pub mod commands;
pub mod config;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use config::ConfigError;

pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("refusing to overwrite {0} (pass --force)")]
    Exists(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{context}: {source}")]
    Pam { context: String, source: pam::Error },
    #[error("{0}")]
    Usage(String),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) | Self::Usage(_) => EXIT_CONFIG,
            Self::Pam {
                source: pam::Error::Budget { .. },
                ..
            } => EXIT_CONFIG,
            _ => EXIT_RUNTIME,
        }
    }
}

/// Attaches what was being done to a library error.
pub trait Context<T> {
    fn context(self, what: impl Into<String>) -> Result<T, CliError>;
}

impl<T> Context<T> for pam::Result<T> {
    fn context(self, what: impl Into<String>) -> Result<T, CliError> {
        self.map_err(|source| CliError::Pam {
            context: what.into(),
            source,
        })
    }
}

#[derive(Debug, Parser)]
#[command(name = "pam", version, about = "Learned bit allocation for passive acoustic monitoring")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone)]
pub struct Common {
    /// INI config file; `demo` selects the bundled demo config.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed (overrides run.seed).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    pub force: bool,
    /// Worker threads (0: one per core).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Config override, `section.key=value`; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic train and test datasets.
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Train a detector, optionally on compressed spectrograms.
    Train {
        #[command(flatten)]
        common: Common,
        /// Directory written by `synth`.
        #[arg(long)]
        data: PathBuf,
    },
    /// Train the frequency-convolution segmenter and its ablation.
    Segment {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
    },
    /// Learn the per-band lambda vector jointly with a detector.
    Alloc {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
    },
    /// Encode spectrograms into blocks under the configured plan.
    Compress {
        #[command(flatten)]
        common: Common,
        /// Encode every test clip of this dataset directory.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Spectrogram files to encode.
        #[arg(long = "input", num_args = 1..)]
        inputs: Vec<PathBuf>,
    },
    /// Decode blocks back into spectrogram files.
    Decompress {
        #[command(flatten)]
        common: Common,
        #[arg(long = "input", num_args = 1.., required = true)]
        inputs: Vec<PathBuf>,
    },
    /// Rate-accuracy sweep over allocation methods, budgets and seeds.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
    },
    /// Precision-recall curve of a trained detector on the test split.
    Pr {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint written by `train`.
        #[arg(long)]
        model: PathBuf,
    },
}

impl Command {
    pub fn common(&self) -> &Common {
        match self {
            Command::Synth { common }
            | Command::Train { common, .. }
            | Command::Segment { common, .. }
            | Command::Alloc { common, .. }
            | Command::Compress { common, .. }
            | Command::Decompress { common, .. }
            | Command::Eval { common, .. }
            | Command::Pr { common, .. } => common,
        }
    }
}

/// Layers defaults, the config file, `PAM_*` variables, `--set` and the
/// dedicated flags, in that order.
pub fn load_config(common: &Common, env: impl IntoIterator<Item = (String, String)>) -> Result<config::RunConfig, CliError> {
    let mut cfg = config::RunConfig::default();
    if let Some(path) = &common.config {
        cfg.apply_file(path)?;
    }
    cfg.apply_env(env)?;
    for kv in &common.overrides {
        cfg.apply_override(kv)?;
    }
    if let Some(seed) = common.seed {
        cfg.set("run.seed", &seed.to_string())?;
    }
    if let Some(t) = common.threads {
        cfg.set("run.threads", &t.to_string())?;
    }
    Ok(cfg)
}

pub fn run(cli: Cli) -> Result<PathBuf, CliError> {
    let common = cli.command.common();
    let cfg = load_config(common, std::env::vars())?;
    let settings = cfg.resolve()?;
    if settings.threads > 0 {
        // fails only if a pool already exists, which is harmless here
        let _ = rayon::ThreadPoolBuilder::new().num_threads(settings.threads).build_global();
    }
    commands::dispatch(&cli.command, &cfg, &settings)
}
