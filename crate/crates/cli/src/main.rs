//! `swarmwm`: generate instances and expert demonstrations, learn the world
//! model, fly missions and aggregate their metrics.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Exit status for domain failures (bad input data, failed planning, I/O).
const EXIT_DOMAIN: u8 = 1;
/// Exit status for malformed invocations.
const EXIT_USAGE: u8 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "swarmwm",
    version,
    about = "Expert-guided world model and abnormality-minimizing planner for UAV swarms",
    after_help = "Logging: set SWARM_LOG to error, warn, info or debug (default warn)."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Preset {
    /// Desk-scale settings: 50 demonstrations, 20 test missions.
    Ci,
    /// Full-scale settings: 5000 demonstrations, 1000 test missions.
    #[value(alias = "paper")]
    Full,
}

impl Preset {
    fn name(self) -> &'static str {
        match self {
            Preset::Ci => "ci",
            Preset::Full => "full",
        }
    }
}

/// Configuration layering shared by the pipeline subcommands:
/// preset defaults, then the config file, then explicit flags.
#[derive(Debug, Clone, Args)]
struct ConfigArgs {
    /// Base settings before the config file and flags are applied.
    #[arg(long, value_enum, default_value = "full")]
    preset: Preset,
    /// JSON file with (partial) simulation settings layered over the preset.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Sample random mission instances and write one JSON file per seed.
    GenInstances {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Number of instances (default: n_test of the resolved config).
        #[arg(long)]
        count: Option<usize>,
        /// First seed (default: test_seed of the resolved config).
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Plan expert demonstrations with the genetic algorithm. Existing
    /// demonstrations in the output directory are reused.
    GenDemos {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Number of demonstrations (default: demonstrations of the config).
        #[arg(long)]
        count: Option<usize>,
        /// First seed (default: train_seed of the config).
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Learn a world model from a directory of demonstrations.
    Learn {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Directory written by `gen-demos`.
        #[arg(long, value_name = "DIR")]
        demos: PathBuf,
        /// Laplace smoothing constant (default: alpha of the config).
        #[arg(long)]
        alpha: Option<f64>,
        /// Model file to write.
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
    },
    /// Fly missions online with the learned model and write metrics and traces.
    Simulate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Model file. Without it a model is trained first into OUT/demos
        /// and OUT/model.json.
        #[arg(long, value_name = "FILE")]
        model: Option<PathBuf>,
        /// Fly this instance instead of sampling one.
        #[arg(long, value_name = "FILE", conflicts_with = "count")]
        instance: Option<PathBuf>,
        /// Seed of the first mission (default: test_seed of the config).
        #[arg(long)]
        seed: Option<u64>,
        /// Number of missions; more than one writes OUT/run_<seed>/ folders
        /// and OUT/summary.json.
        #[arg(long, default_value_t = 1)]
        count: usize,
        /// Filter whose estimate drives control.
        #[arg(long, value_enum)]
        filter: Option<FilterArg>,
        /// Output directory.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Cluster flight-log velocities and run the label prediction/correction
    /// experiment.
    Ingest {
        /// Flight log CSV with header t,x,y,z,uav_id.
        #[arg(long, value_name = "FILE", required_unless_present = "synthetic", conflicts_with = "synthetic")]
        log: Option<PathBuf>,
        /// Use the built-in two-UAV synthetic log with this seed.
        #[arg(long, value_name = "SEED")]
        synthetic: Option<u64>,
        /// Position noise of the synthetic log (m).
        #[arg(long, default_value_t = 0.01)]
        noise: f64,
        /// Resample every UAV onto this uniform time step first (s).
        #[arg(long)]
        resample_dt: Option<f64>,
        /// GNG settings as JSON (partial), layered over the defaults.
        #[arg(long, value_name = "FILE")]
        gng_config: Option<PathBuf>,
        /// Maximum number of GNG nodes.
        #[arg(long)]
        max_nodes: Option<usize>,
        /// GNG seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Smoothing constant of the transition matrix.
        #[arg(long, default_value_t = 1.0)]
        alpha: f64,
        /// Sharpness of the measurement likelihood.
        #[arg(long, default_value_t = 5.0)]
        beta: f64,
        /// Output directory.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Aggregate every metrics.json below a directory into CSV tables.
    Report {
        /// Directory searched recursively for metrics.json files.
        #[arg(long, value_name = "DIR")]
        runs: PathBuf,
        /// Output directory for runs.csv and summary.csv (default: RUNS).
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum FilterArg {
    Ekf,
    Pf,
}

/// Failure of a subcommand, mapped onto the exit status.
#[derive(Debug)]
enum Failure {
    Usage(String),
    Domain(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Domain(e)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("SWARM_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}\n\nFor more information, try '--help'.");
            ExitCode::from(EXIT_USAGE)
        }
        Err(Failure::Domain(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_DOMAIN)
        }
    }
}
