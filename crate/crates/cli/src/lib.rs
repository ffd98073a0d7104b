//! Command-line front end: training, inference, evaluation and visualization.

pub mod commands;
pub mod config;
pub mod draw;

use std::ffi::OsString;
use std::fmt;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use lane3d::data::FixtureSpec;

use crate::commands::VisualizeInputs;
use crate::config::{parse_pairs, split_pair, RunConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExitKind {
    Usage,
    Data,
    /// Non-finite values or undefined metrics.
    Numeric,
}

#[derive(Debug)]
pub struct CliError {
    pub kind: ExitKind,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            kind: ExitKind::Usage,
            message: message.into(),
        }
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self {
            kind: ExitKind::Data,
            message: message.into(),
        }
    }

    pub fn code(&self) -> i32 {
        match self.kind {
            ExitKind::Usage => 1,
            ExitKind::Data => 2,
            ExitKind::Numeric => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<lane3d::Error> for CliError {
    fn from(e: lane3d::Error) -> Self {
        use lane3d::Error as E;
        let kind = match &e {
            E::InvalidArgument(_) => ExitKind::Usage,
            E::NonFinite(_) | E::UndefinedMetric(_) | E::FitImpossible(_) => ExitKind::Numeric,
            _ => ExitKind::Data,
        };
        Self {
            kind,
            message: e.to_string(),
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "lane3d", version, about = "Spatiotemporal lane detection on TuSimple-style clips")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Options shared by every pipeline command.
#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// Flat `key = value` config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// exp1, exp2 or exp3.
    #[arg(long)]
    pub preset: Option<String>,
    /// desk or full.
    #[arg(long)]
    pub scale: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Dataset root (label files and clip frames).
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Override any config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

impl Common {
    /// File pairs, then `--set` pairs, then dedicated flags.
    pub fn resolve(&self) -> Result<RunConfig, CliError> {
        let mut pairs = Vec::new();
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path).map_err(|e| CliError::data(format!("config {}: {e}", path.display())))?;
            pairs.extend(parse_pairs(&text, &path.display().to_string())?);
        }
        for s in &self.set {
            pairs.push(split_pair(s).map_err(|m| CliError::usage(format!("--set: {m}")))?);
        }
        let mut flag = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                pairs.push((k.to_string(), v));
            }
        };
        flag("preset", self.preset.clone());
        flag("scale", self.scale.clone());
        flag("seed", self.seed.map(|s| s.to_string()));
        flag("out", self.out.as_ref().map(|p| p.display().to_string()));
        flag("dataset", self.dataset.as_ref().map(|p| p.display().to_string()));
        RunConfig::resolve(&pairs)
    }
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train from a seeded initialization; writes the loss log and checkpoints.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Predict lanes for a list of clips; writes TuSimple prediction lines.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Label file or list of frame paths, one per line.
        #[arg(long)]
        input: PathBuf,
    },
    /// Score predictions against labels.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        predictions: PathBuf,
        /// Label file or directory of label files.
        #[arg(long)]
        labels: PathBuf,
    },
    /// Draw lane overlays and loss curves.
    Visualize {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        image: Option<PathBuf>,
        #[arg(long)]
        predictions: Option<PathBuf>,
        #[arg(long)]
        labels: Option<PathBuf>,
        /// Training loss log to plot.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Write a synthetic dataset in the TuSimple layout.
    MakeFixture {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 4)]
        clips: usize,
        #[arg(long, default_value_t = 5)]
        frames: usize,
        #[arg(long, default_value_t = 256)]
        width: u32,
        #[arg(long, default_value_t = 128)]
        height: u32,
    },
}

pub fn execute(command: Command) -> Result<(), CliError> {
    match command {
        Command::Train { common } => {
            let cfg = common.resolve()?;
            let s = commands::train(&cfg)?;
            println!(
                "trained {} steps; loss {} -> {}; checkpoint {}",
                s.steps,
                s.first_loss.map_or("-".into(), |v| format!("{v:.6}")),
                s.last_loss.map_or("-".into(), |v| format!("{v:.6}")),
                s.checkpoint.display()
            );
        }
        Command::Infer { common, checkpoint, input } => {
            let cfg = common.resolve()?;
            commands::infer(&cfg, &checkpoint, &input)?;
        }
        Command::Eval {
            common,
            predictions,
            labels,
        } => {
            let cfg = common.resolve()?;
            commands::eval(&cfg, &predictions, &labels)?;
        }
        Command::Visualize {
            common,
            image,
            predictions,
            labels,
            log,
        } => {
            let cfg = common.resolve()?;
            let inputs = VisualizeInputs {
                image,
                predictions,
                labels,
                log,
            };
            for p in commands::visualize(&cfg, &inputs)? {
                println!("{}", p.display());
            }
        }
        Command::MakeFixture {
            out,
            seed,
            clips,
            frames,
            width,
            height,
        } => {
            let spec = FixtureSpec {
                clips,
                frames,
                width,
                height,
                seed,
            };
            let anns = commands::make_fixture(&out, &spec)?;
            println!("{} clips written to {}", anns.len(), out.display());
        }
    }
    Ok(())
}

/// Parses arguments and runs the command, returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.code()
        }
    }
}
