use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};

use ape_harness::{
    cmd_ablate_horizon, cmd_ablate_ood, cmd_eval, cmd_generate, cmd_report, cmd_train,
    ExperimentConfig, RunPaths,
};

#[derive(Parser)]
#[command(
    name = "ape",
    about = "Adaptive prediction ensemble: train, evaluate, and ablate a rule-based + learned trajectory forecaster with a learned router"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct CommonArgs {
    /// Experiment config file (key = value lines); defaults apply if omitted.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Run directory for all artifacts.
    #[arg(long)]
    out: PathBuf,

    /// Override the config's primary seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the training and evaluation scene files.
    Generate(CommonArgs),
    /// Train the ensemble and persist checkpoint, buffer, and loss curves.
    Train(CommonArgs),
    /// Evaluate every configured router kind cross-distribution.
    Eval(CommonArgs),
    /// Sweep the OOD ratio of the evaluation mixture.
    AblateOod(CommonArgs),
    /// Sweep the prediction horizon (training per horizon as needed).
    AblateHorizon(CommonArgs),
    /// Render report.txt and plot-ready curves from a run directory.
    Report {
        /// Run directory holding the CSV artifacts.
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(args: &CommonArgs) -> Result<(ExperimentConfig, RunPaths, u64)> {
    let config = match &args.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    let seed = args.seed.unwrap_or_else(|| config.primary_seed());
    std::fs::create_dir_all(&args.out)?;
    Ok((config, RunPaths::new(&args.out), seed))
}

fn run() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Generate(args) => {
            let (config, paths, seed) = load_config(&args)?;
            cmd_generate(&config, &paths, seed)?;
            println!("scenes written to {}", paths.scenes_dir().display());
        }
        Command::Train(args) => {
            let (config, paths, seed) = load_config(&args)?;
            cmd_train(&config, &paths, seed)?;
            println!("checkpoint written to {}", paths.checkpoint().display());
        }
        Command::Eval(args) => {
            let (config, paths, seed) = load_config(&args)?;
            let rows = cmd_eval(&config, &paths, seed)?;
            for row in rows {
                println!(
                    "{:<10} {:<13} minADE {:.4}  minFDE {:.4}  miss {:.4}  mAP {:.4}",
                    row.dataset_tag,
                    row.method,
                    row.report.min_ade,
                    row.report.min_fde,
                    row.report.miss_rate,
                    row.report.map_score
                );
            }
        }
        Command::AblateOod(args) => {
            let (config, paths, seed) = load_config(&args)?;
            for (ratio, gain) in cmd_ablate_ood(&config, &paths, seed)? {
                println!("ood ratio {ratio:.2}: gain {gain:.2}%");
            }
        }
        Command::AblateHorizon(args) => {
            let (config, paths, seed) = load_config(&args)?;
            for (horizon, gain) in cmd_ablate_horizon(&config, &paths, seed)? {
                println!("horizon {horizon:>3}: gain {gain:.2}%");
            }
        }
        Command::Report { out } => {
            let paths = RunPaths::new(&out);
            cmd_report(&paths)?;
            println!("report written to {}", paths.report().display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}
