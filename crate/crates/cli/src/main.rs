//! Command-line driver: scene synthesis, plane fitting, relocalization and
//! evaluation.

mod commands;
mod config;
mod error;
mod relocalize;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{ExperimentConfig, Overrides};
use error::CliResult;

#[derive(Parser)]
#[command(name = "planar-reloc", version, about = "Plane-based camera relocalization against a planar map")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// Experiment configuration (JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; results do not depend on this.
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene directory from a spec file.
    Synth {
        spec: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Extract planar primitives from a depth map.
    FitPlanes {
        depth: PathBuf,
        #[arg(long)]
        intrinsics: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Estimate a pose for every query of a scene and report metrics.
    Relocalize {
        scene: PathBuf,
        #[command(flatten)]
        common: Common,
        /// Run depth-alignment refinement after the robust estimate.
        #[arg(long)]
        refine: bool,
        /// Generate embeddings from the ground-truth labels.
        #[arg(long)]
        synthetic_embeddings: bool,
        /// Use the ground-truth labels as the predicted matches.
        #[arg(long)]
        oracle_matches: bool,
    },
    /// Score pose estimates and match predictions against a scene.
    Evaluate {
        #[arg(long)]
        estimates: PathBuf,
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        predictions: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
}

fn overrides(c: &Common) -> Overrides {
    Overrides {
        seed: c.seed,
        threads: c.threads,
        out: c.out.clone(),
        ..Default::default()
    }
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Synth { spec, common } => commands::synth(&spec, common.seed, common.out.as_deref()),
        Command::FitPlanes {
            depth,
            intrinsics,
            common,
        } => {
            let cfg = ExperimentConfig::load(common.config.as_deref(), &overrides(&common))?;
            commands::fit_planes(&depth, &intrinsics, &cfg)
        }
        Command::Relocalize {
            scene,
            common,
            refine,
            synthetic_embeddings,
            oracle_matches,
        } => {
            let over = Overrides {
                refine,
                synthetic_embeddings,
                oracle_matches,
                ..overrides(&common)
            };
            let cfg = ExperimentConfig::load(common.config.as_deref(), &over)?;
            relocalize::run(&scene, &cfg)
        }
        Command::Evaluate {
            estimates,
            scene,
            predictions,
            common,
        } => {
            let cfg = ExperimentConfig::load(common.config.as_deref(), &overrides(&common))?;
            commands::evaluate(&estimates, &scene, predictions.as_deref(), &cfg)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
