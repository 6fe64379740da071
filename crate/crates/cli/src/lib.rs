//! Command-line driver: dataset generation, training, forecasting and
//! evaluation from one TOML run configuration.

pub mod commands;
pub mod config;
pub mod data;

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use panfore::pipeline::{Baseline, OdometryMode};
use panfore::stuff::RefineMode;
use panfore::{Error, Result};

use commands::{Component, WeightPaths};
use config::{Preset, RunConfig, Split};

#[derive(Debug, Parser)]
#[command(name = "panfore", version, about = "Panoptic segmentation forecasting on synthetic scenes")]
pub struct Cli {
    /// TOML run configuration; built-in defaults fill anything it omits.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured run seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Replaces the configured horizon with a preset.
    #[arg(long, global = true, value_enum)]
    pub preset: Option<Preset>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate train and val sequences plus a manifest.
    Gen {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one component on the training split.
    Train {
        #[arg(value_enum)]
        which: Component,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Weights file; defaults to the configured path for the component.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Forecast the last frame of every sequence in a split.
    Forecast {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "val")]
        split: Split,
        #[command(flatten)]
        weights: WeightArgs,
        #[command(flatten)]
        options: ForecastArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score predictions against ground truth.
    Eval {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "val")]
        split: Split,
        #[arg(long)]
        pred: Option<PathBuf>,
        /// JSON report path; defaults to report.json in the prediction directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the effective configuration.
    PrintConfig,
}

#[derive(Debug, Args)]
pub struct WeightArgs {
    #[arg(long)]
    pub things: Option<PathBuf>,
    #[arg(long)]
    pub stuff: Option<PathBuf>,
    #[arg(long)]
    pub odom: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ForecastArgs {
    #[arg(long, value_enum)]
    pub baseline: Option<BaselineArg>,
    #[arg(long, value_enum)]
    pub odometry: Option<OdometryArg>,
    #[arg(long, value_enum)]
    pub refine: Option<RefineArg>,
    /// Forecast only instances detected in the last observed frame.
    #[arg(long)]
    pub filter_last_frame_presence: bool,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum BaselineArg {
    CopyLast,
    Linear,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum OdometryArg {
    Active,
    Passive,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum RefineArg {
    Learned,
    NearestFill,
}

impl Cli {
    /// The configuration after applying the file and command-line overrides.
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path).map_err(|e| match e {
                Error::Io(io) => Error::Usage(format!("cannot read config {}: {io}", path.display())),
                other => other,
            })?,
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(p) = self.preset {
            cfg.horizon = p.horizon();
        }
        if let Command::Forecast { options, .. } = &self.command {
            if let Some(b) = options.baseline {
                cfg.forecast.baseline = Some(match b {
                    BaselineArg::CopyLast => Baseline::CopyLast,
                    BaselineArg::Linear => Baseline::Linear,
                });
            }
            if let Some(o) = options.odometry {
                cfg.forecast.odometry = match o {
                    OdometryArg::Active => OdometryMode::Active,
                    OdometryArg::Passive => OdometryMode::Passive,
                };
            }
            if let Some(r) = options.refine {
                cfg.forecast.refine = match r {
                    RefineArg::Learned => RefineMode::Learned,
                    RefineArg::NearestFill => RefineMode::NearestFill,
                };
            }
            if options.filter_last_frame_presence {
                cfg.forecast.filter_last_frame_presence = true;
            }
        }
        Ok(cfg)
    }
}

/// Runs one parsed command, writing human-readable output to `stdout`.
pub fn execute(cli: &Cli, stdout: &mut dyn Write) -> Result<()> {
    let cfg = cli.resolve()?;
    let p = &cfg.paths;
    match &cli.command {
        Command::PrintConfig => {
            cfg.validate()?;
            write!(stdout, "{}", cfg.to_toml())?;
        }
        Command::Gen { out } => {
            let out = out.clone().unwrap_or_else(|| p.data.clone());
            let m = data::generate_dataset(&cfg, &out)?;
            writeln!(stdout, "wrote {} train and {} val sequences to {}", m.train.len(), m.val.len(), out.display())?;
        }
        Command::Train { which, data, out } => {
            let data = data.clone().unwrap_or_else(|| p.data.clone());
            let out = out.clone().unwrap_or_else(|| match which {
                Component::Things => p.things.clone(),
                Component::Stuff => p.stuff.clone(),
                Component::Odom => p.odom.clone(),
            });
            let trained = commands::train(&cfg, &data, *which, &out)?;
            for (path, log) in &trained.logs {
                let w = (log.losses.len() / 10).max(1);
                let s = log.smoothed(w);
                writeln!(
                    stdout,
                    "{}: {} steps, loss {:.5} -> {:.5} (log {})",
                    which.name(),
                    log.losses.len(),
                    s.first().copied().unwrap_or(f64::NAN),
                    s.last().copied().unwrap_or(f64::NAN),
                    path.display()
                )?;
            }
            writeln!(stdout, "wrote {}", out.display())?;
        }
        Command::Forecast { data, split, weights, out, .. } => {
            let data = data.clone().unwrap_or_else(|| p.data.clone());
            let out = out.clone().unwrap_or_else(|| p.predictions.clone());
            let paths = WeightPaths {
                things: Some(weights.things.clone().unwrap_or_else(|| p.things.clone())),
                stuff: Some(weights.stuff.clone().unwrap_or_else(|| p.stuff.clone())),
                odom: Some(weights.odom.clone().unwrap_or_else(|| p.odom.clone())),
            };
            let n = commands::forecast(&cfg, &data, *split, &paths, &out)?;
            writeln!(stdout, "wrote {n} predictions to {}", out.display())?;
        }
        Command::Eval { data, split, pred, out } => {
            let data = data.clone().unwrap_or_else(|| p.data.clone());
            let pred = pred.clone().unwrap_or_else(|| p.predictions.clone());
            let report = commands::eval(&data, *split, &pred)?;
            let out = out.clone().unwrap_or_else(|| pred.join("report.json"));
            std::fs::write(&out, commands::report_json(&report) + "\n")?;
            write!(stdout, "{}", report.render_table())?;
        }
    }
    Ok(())
}

/// Exit status for an error: 2 for usage and configuration problems,
/// 1 for everything else.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Usage(_) | Error::Config(_) => 2,
        _ => 1,
    }
}

/// Parses `args`, runs the command and returns the process exit status.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let stdout = std::io::stdout();
    match execute(&cli, &mut stdout.lock()) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
