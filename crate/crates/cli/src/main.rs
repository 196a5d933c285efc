use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rankmatch::runner::{self, ExperimentConfig, Trainer};
use rankmatch::Error;

/// Semi-supervised training with ranking losses on logits.
#[derive(Parser)]
#[command(name = "rankmatch", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write metrics and checkpoints.
    Train {
        config: PathBuf,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the test split.
    Eval { checkpoint: PathBuf, config: PathBuf },
    /// Time the ranking losses over the configured batch sizes.
    Bench { config: PathBuf },
    /// Write logits and representations of the test split to CSV.
    ExportLogits { checkpoint: PathBuf, config: PathBuf },
    /// Print triplet counts for balanced batches.
    Census { config: PathBuf },
}

fn load(path: &Path) -> rankmatch::Result<ExperimentConfig> {
    Ok(ExperimentConfig::load(path)?.with_env_override())
}

fn run(cli: Cli) -> rankmatch::Result<()> {
    match cli.command {
        Command::Train { config, resume } => {
            let cfg = load(&config)?;
            let mut trainer = match resume {
                Some(ckpt) => Trainer::resume(cfg, &ckpt)?,
                None => Trainer::new(cfg)?,
            };
            let out = trainer.run()?;
            println!("steps: {}", out.steps_run);
            if let Some(v) = out.best_validation_accuracy {
                println!("best validation accuracy (EMA): {v:.4}");
            }
            if let Some(t) = out.final_test_accuracy {
                println!("final test accuracy (EMA): {t:.4}");
            }
            println!("metrics: {}", out.metrics_path.display());
        }
        Command::Eval { checkpoint, config } => {
            let e = runner::evaluate_checkpoint(&load(&config)?, &checkpoint)?;
            println!("accuracy: {:.4}", e.accuracy);
            println!("error rate: {:.4}", e.error_rate);
            println!("confusion (rows = true class):");
            for row in &e.confusion {
                println!("{}", row.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(" "));
            }
        }
        Command::Bench { config } => {
            let (path, records) = runner::run_bench(&load(&config)?)?;
            for r in &records {
                println!(
                    "{} n={} triplets={} median={}ns",
                    r.variant,
                    r.batch_size,
                    r.triplets(),
                    r.wall_time_ns
                );
            }
            println!("wrote {}", path.display());
        }
        Command::ExportLogits { checkpoint, config } => {
            let (path, n) = runner::export_checkpoint_logits(&load(&config)?, &checkpoint)?;
            println!("wrote {n} rows to {}", path.display());
        }
        Command::Census { config } => {
            let cfg = load(&config)?;
            let rows = runner::run_census(&cfg)?;
            runner::write_census(std::io::stdout().lock(), cfg.bench.classes, &rows)
                .map_err(|e| Error::Io {
                    path: "<stdout>".into(),
                    source: e,
                })?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => ExitCode::from(2),
                Error::NonFiniteLoss { .. } => ExitCode::from(3),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
