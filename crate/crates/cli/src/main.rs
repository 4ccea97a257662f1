//! `okf`: simulate radar datasets, estimate or tune Kalman filter noise,
//! evaluate parameter files and run multi-target tracking episodes.

mod commands;
mod config;
mod params;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use okf_core::error::ErrorKind;

/// Exit codes by error class.
const EXIT_CONFIG: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_NUMERIC: u8 = 4;

#[derive(Parser)]
#[command(name = "okf", version, about = "Optimized Kalman filter noise toolkit")]
struct Cli {
    /// Worker threads (default: available cores).
    #[arg(long, global = true, env = "OKF_JOBS")]
    jobs: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a benchmark dataset.
    Simulate {
        #[arg(long)]
        benchmark: String,
        #[arg(long, default_value_t = 1000)]
        targets: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Output file (default: $OKF_OUT_DIR/<benchmark>-n<targets>-s<seed>.json).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Estimate Q and R from sample covariances (or oracle R).
    Estimate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Optimize Q and R by gradient descent on the filtering loss.
    Tune {
        #[arg(long)]
        config: PathBuf,
    },
    /// Evaluate parameter files on a dataset; the first is the baseline.
    Eval {
        #[arg(long, num_args = 1.., required = true)]
        models: Vec<PathBuf>,
        #[arg(long)]
        dataset: PathBuf,
        /// Report directory (default: $OKF_OUT_DIR/eval-<hash>).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print a saved report, optionally re-pairing against a baseline.
    Compare {
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        baseline: Option<String>,
    },
    /// Run a multi-target tracking episode.
    Track {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        params: PathBuf,
        #[arg(long = "episode-config")]
        episode_config: PathBuf,
        /// Output directory (default: $OKF_OUT_DIR/track).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> okf_core::Result<()> {
    match cli.command {
        Command::Simulate {
            benchmark,
            targets,
            seed,
            out,
        } => commands::simulate(&benchmark, targets, seed, out),
        Command::Estimate { config } => commands::estimate(&config),
        Command::Tune { config } => commands::tune_cmd(&config),
        Command::Eval { models, dataset, out } => commands::eval(&models, &dataset, out),
        Command::Compare { report, baseline } => commands::compare(&report, baseline.as_deref()),
        Command::Track {
            dataset,
            params,
            episode_config,
            out,
        } => commands::track(&dataset, &params, &episode_config, out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            eprintln!("error: --jobs must be positive");
            return ExitCode::from(EXIT_CONFIG);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global() {
            log::warn!("could not size worker pool: {e}");
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.kind() {
                ErrorKind::Config => EXIT_CONFIG,
                ErrorKind::Data => EXIT_DATA,
                ErrorKind::Numeric => EXIT_NUMERIC,
            })
        }
    }
}
