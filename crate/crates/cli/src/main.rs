//! `daunce`: run the attribution pipeline from a JSON config.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use daunce_core::config::RunConfig;
use daunce_core::pipeline::{exit_code, Command, Pipeline};
use daunce_core::Result;

#[derive(Parser)]
#[command(name = "daunce", version, about = "Training data attribution from loss covariance across perturbed models")]
struct Cli {
    #[arg(long, global = true, default_value = "daunce.json")]
    config: PathBuf,
    /// Output directory; overrides the config (also read from DAUNCE_OUT).
    #[arg(long, global = true, env = "DAUNCE_OUT")]
    out: Option<PathBuf>,
    /// Worker threads; overrides the config.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Overrides the ensemble master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write the train and query CSVs.
    GenData,
    /// Train the anchor model and cache its gradients.
    Train,
    /// Train the perturbed ensemble and record its loss matrix.
    Ensemble,
    /// Score training examples against queries from the loss matrix.
    Attribute,
    /// Exact influence scores at the anchor.
    Oracle,
    /// Linear datamodeling score of a score file.
    Lds {
        #[arg(long)]
        scores: Option<PathBuf>,
    },
    /// Retrain after removing top-ranked examples, beside random removal.
    Removal {
        #[arg(long)]
        scores: Option<PathBuf>,
    },
    /// Monte Carlo check of the self-influence target on a quadratic problem.
    Unbiasedness,
    /// LDS against ensemble size with an exponential fit.
    ScalingFit,
    /// Compare analytic gradients with central differences.
    CheckGrads,
    /// Convert a report to a long-format `series,x,y` table.
    PlotData { report: PathBuf },
}

impl From<Cmd> for Command {
    fn from(cmd: Cmd) -> Self {
        match cmd {
            Cmd::GenData => Command::GenData,
            Cmd::Train => Command::Train,
            Cmd::Ensemble => Command::Ensemble,
            Cmd::Attribute => Command::Attribute,
            Cmd::Oracle => Command::Oracle,
            Cmd::Lds { scores } => Command::Lds { scores },
            Cmd::Removal { scores } => Command::Removal { scores },
            Cmd::Unbiasedness => Command::Unbiasedness,
            Cmd::ScalingFit => Command::ScalingFit,
            Cmd::CheckGrads => Command::CheckGrads,
            Cmd::PlotData { report } => Command::PlotData { report },
        }
    }
}

fn run(cli: Cli) -> Result<Vec<PathBuf>> {
    let config = RunConfig::load(&cli.config)?;
    let workers = cli.workers.or(config.workers);
    let pipeline = Pipeline::new(config, cli.out, cli.seed)?;
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = workers {
        pool = pool.num_threads(n);
    }
    let pool = pool.build().map_err(|e| daunce_core::Error::Input(format!("worker pool: {e}")))?;
    let command = Command::from(cli.command);
    pool.install(|| pipeline.run(&command))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(paths) => {
            for p in paths {
                println!("{}", p.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
