//! Command-line front end for the density-over-distance pipeline:
//! dataset generation, regressor training, metric evaluation, run
//! comparison, and the detector tilt-bias study.
//!
//! Exit codes: 0 success, 1 usage error, 2 bad configuration or data,
//! 3 numerical failure during training or evaluation.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use swarm_density::baselines::BaselineError;
use swarm_density::geometry::GeometryError;
use swarm_density::labeling::{LabelError, LabelMode};
use swarm_density::metrics::MetricsError;
use swarm_density::regressor::NetError;
use swarm_density::scenegen::GenError;

use commands::SplitOpt;
use config::{apply_overrides, load_config, resolve, Overrides, Resolved, RunConfig, TailOpt};

/// Errors surfaced to the shell, grouped by exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{0}")]
    Data(String),
    #[error(transparent)]
    Gen(#[from] GenError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Baseline(#[from] BaselineError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Label(#[from] LabelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CliError {
    /// Usage errors exit 1 (handled by the argument parser before this is
    /// reached), numerical failures 3, everything else 2.
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Net(NetError::NonFinite { .. } | NetError::Diverged { .. }) => 3,
            CliError::Metrics(MetricsError::NonFinite(_) | MetricsError::ZeroMass) => 3,
            _ => 2,
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "swarm-density",
    version,
    about = "Distance-density swarm perception: data generation, training, and evaluation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a balanced, split dataset of rendered crops with labels.
    Gen {
        #[command(flatten)]
        common: CommonFlags,
        /// Dataset output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the histogram regressor on a dataset's train split.
    Train {
        #[command(flatten)]
        common: CommonFlags,
        /// Dataset directory produced by `gen`.
        #[arg(long)]
        dataset: PathBuf,
        /// Directory for checkpoint and history.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint, or the box-size detector, on a dataset split.
    Eval {
        #[command(flatten)]
        common: CommonFlags,
        /// Checkpoint to evaluate; replaced by --ideal for the baseline.
        #[arg(long, required_unless_present = "ideal", conflicts_with = "ideal")]
        checkpoint: Option<PathBuf>,
        /// Evaluate the ideal bounding-box detector instead of a checkpoint.
        #[arg(long)]
        ideal: bool,
        /// Dataset directory produced by `gen`.
        #[arg(long)]
        dataset: PathBuf,
        /// Which split to score.
        #[arg(long, value_enum, default_value = "test")]
        split: SplitOpt,
        /// Directory for the metric report.
        #[arg(long)]
        out: PathBuf,
    },
    /// Join evaluation reports into one table with the best runs marked.
    Compare {
        /// Evaluation output directories (each holding report.csv + meta.json).
        #[arg(required = true, num_args = 1..)]
        reports: Vec<PathBuf>,
        /// Directory for the comparison table.
        #[arg(long)]
        out: PathBuf,
    },
    /// Sweep observer tilt and report the detector's distance-bin drift.
    BiasStudy {
        #[command(flatten)]
        common: CommonFlags,
        /// Directory for the sweep table.
        #[arg(long)]
        out: PathBuf,
    },
}

/// Overrides accepted by every pipeline command.
#[derive(Debug, Clone, Args)]
struct CommonFlags {
    /// TOML configuration file; built-in defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed for scenes, weight init, and shuffling.
    #[arg(long)]
    seed: Option<u64>,
    /// Dataset size (train + val + test); val and test rescale
    /// proportionally to keep the configured split ratio.
    #[arg(long)]
    n: Option<usize>,
    /// Output grid, e.g. 1x1 or 3x3.
    #[arg(long, value_parser = parse_grid)]
    grid: Option<(u32, u32)>,
    /// Label smoothing mode.
    #[arg(long, value_enum)]
    labels: Option<LabelsOpt>,
    /// Regression tail: shared 1x1 conv or a fully connected layer.
    #[arg(long, value_enum)]
    tail: Option<TailOpt>,
    /// Cap on samples kept per target count during balancing.
    #[arg(long)]
    balance_cap: Option<usize>,
    /// Use the dense-swarm preset (more targets, deeper scenes).
    #[arg(long)]
    high_density: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
enum LabelsOpt {
    Raw,
    Partial,
    Full,
}

impl From<LabelsOpt> for LabelMode {
    fn from(l: LabelsOpt) -> Self {
        match l {
            LabelsOpt::Raw => LabelMode::Raw,
            LabelsOpt::Partial => LabelMode::Partial,
            LabelsOpt::Full => LabelMode::Full,
        }
    }
}

fn parse_grid(s: &str) -> Result<(u32, u32), String> {
    let (w, h) = s
        .split_once('x')
        .ok_or_else(|| format!("expected WxH (e.g. 3x3), got {s}"))?;
    let w: u32 = w.trim().parse().map_err(|_| format!("bad grid width in {s}"))?;
    let h: u32 = h.trim().parse().map_err(|_| format!("bad grid height in {s}"))?;
    if w == 0 || h == 0 {
        return Err("grid dimensions must be positive".into());
    }
    Ok((w, h))
}

/// Loads the config file, applies flag overrides, and resolves domain types.
fn prepare(common: &CommonFlags) -> Result<(RunConfig, Resolved), CliError> {
    let mut cfg = load_config(common.config.as_deref())?;
    let ov = Overrides {
        seed: common.seed,
        n: common.n,
        grid: common.grid,
        labels: common.labels.map(Into::into),
        tail: common.tail,
        balance_cap: common.balance_cap,
        high_density: common.high_density,
    };
    apply_overrides(&mut cfg, &ov);
    // Keep the persisted copy in sync with the master seed so the saved
    // run-config reproduces the run verbatim.
    cfg.gen.seed = cfg.seed;
    let resolved = resolve(&cfg)?;
    Ok((cfg, resolved))
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Gen { common, out } => {
            let (cfg, resolved) = prepare(&common)?;
            commands::cmd_gen(&cfg, &resolved, &out)
        }
        Command::Train {
            common,
            dataset,
            out,
        } => {
            let (cfg, resolved) = prepare(&common)?;
            commands::cmd_train(&cfg, &resolved, &dataset, &out)
        }
        Command::Eval {
            common,
            checkpoint,
            ideal,
            dataset,
            split,
            out,
        } => {
            let (cfg, resolved) = prepare(&common)?;
            commands::cmd_eval(
                &cfg,
                &resolved,
                &dataset,
                checkpoint.as_deref(),
                ideal,
                split,
                &out,
            )
        }
        Command::Compare { reports, out } => commands::cmd_compare(&reports, &out),
        Command::BiasStudy { common, out } => {
            let (cfg, resolved) = prepare(&common)?;
            commands::cmd_bias_study(&cfg, &resolved, &out)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            // Help text goes to stdout, diagnostics to stderr.
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
