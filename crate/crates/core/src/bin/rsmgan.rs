use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use rsmgan::experiment::{self, device_from_env, ExperimentConfig, RunPaths, Stage, DEVICE_ENV};
use rsmgan::plot::emit_plots;

/// Seasonal adversarial anomaly detection for multivariate time series.
#[derive(Parser)]
#[command(version, about)]
struct Cli {
    /// Experiment config (TOML). Defaults apply when omitted.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,
    /// Run a single seed instead of the configured list.
    #[arg(short, long, global = true)]
    seed: Option<u64>,
    /// Output directory, overriding the config.
    #[arg(short, long, global = true)]
    out: Option<PathBuf>,
    /// Start from the full-size network and 300-epoch schedule instead of
    /// the desk-scale defaults.
    #[arg(long, global = true)]
    full_scale: bool,
    /// Compute device (only "cpu" is available).
    #[arg(long, global = true, env = DEVICE_ENV)]
    device: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize (or import) the dataset.
    Generate,
    /// Build correlation matrices from the dataset.
    Featurize,
    /// Train the reconstruction model.
    Train,
    /// Fit thresholds and score the test split.
    Detect,
    /// Infer root causes for detected intervals.
    Rootcause,
    /// Compute metrics for every scoring method.
    Evaluate,
    /// Every stage for every seed and sweep entry.
    RunAll,
    /// Draw score traces as SVG.
    Plot,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> rsmgan::Result<()> {
    experiment::resolve_device(cli.device.as_deref())?;
    device_from_env()?;
    let base = if cli.full_scale {
        ExperimentConfig::full_scale()
    } else {
        ExperimentConfig::default()
    };
    let mut config = match &cli.config {
        Some(path) => ExperimentConfig::load_over(path, &base)?,
        None => base,
    };
    if let Some(out) = cli.out {
        config.output_dir = out;
    }
    if let Some(seed) = cli.seed {
        config.seeds = vec![seed];
    }
    config.validate()?;

    let stage = match cli.command {
        Command::Generate => Stage::Generate,
        Command::Featurize => Stage::Featurize,
        Command::Train => Stage::Train,
        Command::Detect => Stage::Detect,
        Command::Rootcause => Stage::RootCause,
        Command::Evaluate => Stage::Evaluate,
        Command::RunAll => {
            let summary = experiment::run_experiment(&config)?;
            for row in summary.rows() {
                println!(
                    "{:<32} {:<10} P={:.3} R={:.3} F1={:.3} FPR={:.4} NAB={:.3} RC={}",
                    row.run,
                    row.method,
                    row.precision,
                    row.recall,
                    row.f1,
                    row.fpr,
                    row.nab_score,
                    row.root_cause_recall
                        .map_or("-".to_string(), |v| format!("{v:.3}"))
                );
            }
            println!("artifacts in {}", summary.root.display());
            return Ok(());
        }
        Command::Plot => {
            for &seed in &config.seeds {
                let paths = RunPaths::for_seed(&config.output_dir, seed);
                for p in emit_plots(&paths, config.mcm.step)? {
                    println!("{}", p.display());
                }
            }
            return Ok(());
        }
    };
    if !config.sweep.is_empty() {
        log::warn!("single stages ignore the sweep; use run-all for sweeps");
    }
    for &seed in &config.seeds {
        let paths = RunPaths::for_seed(&config.output_dir, seed);
        if stage == Stage::Evaluate {
            for (method, r) in experiment::evaluate(&config, &paths)? {
                println!("seed {seed} {method}: {}", serde_json::to_string(&r)?);
            }
        } else if let Err(e) = experiment::run_stage(stage, &config, seed, &paths) {
            experiment::mark_failed(&paths.root, &e);
            return Err(e);
        }
    }
    Ok(())
}
