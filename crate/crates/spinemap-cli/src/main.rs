//! Command-line driver for the vertebrae localization pipeline.
//!
//! Exit codes: 0 success, 1 when some per-scan items failed, 2 on fatal
//! errors (bad config, missing checkpoints, nothing to process).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use spinemap::config::PipelineConfig;
use spinemap::pipeline::{
    cmd_evaluate, cmd_make_labels, cmd_plot, cmd_predict_all, cmd_predict_scan, cmd_sample,
    cmd_train, CommandSummary, ModelKind,
};

#[derive(Parser)]
#[command(
    name = "spinemap",
    version,
    about = "Two-stage CNN pipeline for vertebrae centroid detection and identification in spine CT"
)]
struct Cli {
    /// Pipeline configuration file (TOML). Defaults apply when the default
    /// path does not exist.
    #[arg(long, global = true, default_value = "spinemap.toml")]
    config: PathBuf,

    /// Override the root seed from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Override the output directory from the config.
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Model {
    Detection,
    Identification,
}

#[derive(Subcommand)]
enum Command {
    /// Convert sparse centroid annotations into dense label volumes.
    MakeLabels,
    /// Export training samples plus a reproducibility manifest.
    Sample,
    /// Train the detection or identification model.
    Train {
        #[arg(value_enum)]
        model: Model,
        /// Continue from the existing checkpoint's epoch count.
        #[arg(long)]
        resume: bool,
    },
    /// Predict centroids; one scan with --scan, else every test scan.
    Predict {
        /// A single scan to predict instead of the whole test set.
        #[arg(long)]
        scan: Option<PathBuf>,
        /// Replace the trained networks with analytic stubs.
        #[arg(long)]
        stub: bool,
        /// Also persist the detection/identification/fused maps.
        #[arg(long)]
        save_maps: bool,
    },
    /// Score predictions against ground truth; writes report and plot.
    Evaluate,
    /// Re-render the per-vertebra plot from a stored report.
    Plot,
}

fn load_config(cli: &Cli) -> Result<PipelineConfig, spinemap::Error> {
    let mut cfg = if cli.config.exists() {
        PipelineConfig::load(&cli.config)?
    } else if cli.config == *"spinemap.toml" {
        log::info!("no spinemap.toml found; using built-in defaults");
        PipelineConfig::default()
    } else {
        return Err(spinemap::Error::InvalidConfig(format!(
            "config file {} does not exist",
            cli.config.display()
        )));
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(dir) = &cli.output_dir {
        cfg.data.output_dir = dir.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn summary_exit(summary: &CommandSummary) -> ExitCode {
    if summary.failed == 0 {
        ExitCode::SUCCESS
    } else if summary.processed > 0 {
        ExitCode::from(1)
    } else {
        ExitCode::from(2)
    }
}

fn run(cli: &Cli) -> Result<ExitCode, spinemap::Error> {
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::MakeLabels => {
            let summary = cmd_make_labels(&cfg)?;
            log::info!(
                "dense labels: {} scans processed, {} failed",
                summary.processed,
                summary.failed
            );
            Ok(summary_exit(&summary))
        }
        Command::Sample => {
            let summary = cmd_sample(&cfg)?;
            log::info!(
                "samples: {} scans processed, {} failed",
                summary.processed,
                summary.failed
            );
            Ok(summary_exit(&summary))
        }
        Command::Train { model, resume } => {
            let which = match model {
                Model::Detection => ModelKind::Detection,
                Model::Identification => ModelKind::Identification,
            };
            let path = cmd_train(&cfg, which, *resume)?;
            log::info!("checkpoint written to {}", path.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Predict {
            scan,
            stub,
            save_maps,
        } => match scan {
            Some(path) => {
                let (record, out) = cmd_predict_scan(&cfg, path, *stub, *save_maps)?;
                log::info!(
                    "{}: {} vertebrae accepted, record at {}",
                    record.scan,
                    record.vertebrae.iter().filter(|v| v.accepted).count(),
                    out.display()
                );
                Ok(ExitCode::SUCCESS)
            }
            None => {
                let summary = cmd_predict_all(&cfg, *stub, *save_maps)?;
                log::info!(
                    "predictions: {} scans processed, {} failed",
                    summary.processed,
                    summary.failed
                );
                Ok(summary_exit(&summary))
            }
        },
        Command::Evaluate => {
            let (report, dir) = cmd_evaluate(&cfg)?;
            print!("{}", report.to_table());
            log::info!("report written under {}", dir.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Plot => {
            let path = cmd_plot(&cfg)?;
            log::info!("plot written to {}", path.display());
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(2)
        }
    }
}
