//! `goweb`: batch experiments over browsing logs with goal-aware models.
//!
//! Every command reads a TOML run config (`--config`), writes its artifacts
//! under `--out` and prints one summary line. Inputs default to the standard
//! file names under `--out`, so commands chain without extra flags.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use goweb::session_model::ModelMode;

use crate::commands::{Context, Inputs};
use crate::config::RunConfig;
use crate::error::CliError;

#[derive(Parser)]
#[command(name = "goweb", version, about = "Goal-aware web browsing experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// TOML run config; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the session model mode.
    #[arg(long, global = true, value_enum)]
    mode: Option<Mode>,
    /// Output directory, created if needed.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[arg(long, global = true)]
    events: Option<PathBuf>,
    #[arg(long, global = true)]
    weak_labels: Option<PathBuf>,
    #[arg(long, global = true)]
    truth: Option<PathBuf>,
    #[arg(long, global = true)]
    embeddings: Option<PathBuf>,
    #[arg(long, global = true)]
    estimator: Option<PathBuf>,
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    #[arg(long, global = true)]
    clusters: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Full,
    Np,
    Ablation,
}

impl From<Mode> for ModelMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Full => ModelMode::Full,
            Mode::Np => ModelMode::NonPersonal,
            Mode::Ablation => ModelMode::ContentOnly,
        }
    }
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Generate a synthetic event log, weak labels and ground truth.
    Synth,
    /// Train goal embeddings in the Poincaré ball.
    TrainGoals,
    /// Reconstruction MAP and norm profile of goal embeddings.
    EvalRecon,
    /// Train the goal estimator on weak labels.
    TrainEstimator,
    /// Held-out accuracy of the goal estimator.
    EvalEstimator,
    /// Train the in-session recommender.
    TrainRec,
    /// Ranking metrics of the recommender on warm and cold test sessions.
    EvalRec,
    /// Train the revisitation classifier.
    TrainRevisit,
    /// Classification metrics of the revisitation model.
    EvalRevisit,
    /// K-means++ over visit goal representations and a content baseline.
    Cluster,
    /// NMI and AMI of cluster assignments against ground truth.
    EvalCluster,
    /// Confusion matrix, revisit durations and single-goal session rates.
    Analyze,
    /// Finite-difference checks of every gradient path.
    Gradcheck,
}

fn run(cli: Cli) -> Result<String, CliError> {
    let base = match &cli.common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let config = base.resolve(cli.common.seed, cli.common.mode.map(Into::into))?;
    log::info!("resolved config:\n{}", config.to_toml());
    std::fs::create_dir_all(&cli.common.out).map_err(|e| CliError::Core(goweb::GowebError::Io { path: cli.common.out.clone(), source: e }))?;
    let c = cli.common;
    let ctx = Context {
        config,
        out: c.out,
        inputs: Inputs {
            events: c.events,
            weak_labels: c.weak_labels,
            truth: c.truth,
            embeddings: c.embeddings,
            estimator: c.estimator,
            checkpoint: c.checkpoint,
            clusters: c.clusters,
        },
    };
    match cli.command {
        Command::Synth => commands::synth(&ctx),
        Command::TrainGoals => commands::train_goals(&ctx),
        Command::EvalRecon => commands::eval_recon(&ctx),
        Command::TrainEstimator => commands::train_estimator(&ctx),
        Command::EvalEstimator => commands::eval_estimator(&ctx),
        Command::TrainRec => commands::train_rec(&ctx),
        Command::EvalRec => commands::eval_rec(&ctx),
        Command::TrainRevisit => commands::train_revisit(&ctx),
        Command::EvalRevisit => commands::eval_revisit(&ctx),
        Command::Cluster => commands::cluster(&ctx),
        Command::EvalCluster => commands::eval_cluster(&ctx),
        Command::Analyze => commands::analyze(&ctx),
        Command::Gradcheck => commands::gradcheck(&ctx),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("GOWEB_LOG", "warn")).init();
    match run(Cli::parse()) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
