//! Experiment orchestration: configuration, training, evaluation, exports
//! and the bench and census reports.

pub mod config;
pub mod eval;
pub mod export;
pub mod metrics;
pub mod train;

use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand_distr::{Distribution, Normal};

use crate::bench::{self, BenchRecord};
use crate::error::{Error, Result};
use crate::model::{ModelParams, ModelSpec};
use crate::ranking::{self, RankingVariant, TripletCensus};
use crate::rng;
use crate::tensor::Tensor;

pub use config::{DatasetSource, ExperimentConfig, OUTPUT_DIR_ENV};
pub use eval::{evaluate, Evaluation};
pub use export::{export_logits, load_logits, LogitsRow};
pub use metrics::{emit_metrics, load_metrics, MetricsRow};
pub use train::{prepare_data, PreparedData, StepReport, TrainOutcome, Trainer};

/// Model spec, checkpoint parameters (EMA preferred) and data for a config.
pub fn load_model(cfg: &ExperimentConfig, checkpoint: &Path) -> Result<(ModelSpec, ModelParams, PreparedData)> {
    let data = prepare_data(cfg)?;
    let spec = cfg.model_spec(data.split.train.dims(), data.split.train.num_classes())?;
    let params = train::load_eval_params(&spec, checkpoint)?;
    Ok((spec, params, data))
}

/// Test-split evaluation of a checkpoint.
pub fn evaluate_checkpoint(cfg: &ExperimentConfig, checkpoint: &Path) -> Result<Evaluation> {
    let (spec, params, data) = load_model(cfg, checkpoint)?;
    evaluate(&spec, &params, &data.split.test)
}

/// Writes `logits.csv` for the test split into the output directory.
pub fn export_checkpoint_logits(cfg: &ExperimentConfig, checkpoint: &Path) -> Result<(PathBuf, usize)> {
    let (spec, params, data) = load_model(cfg, checkpoint)?;
    std::fs::create_dir_all(&cfg.output_dir).map_err(|e| Error::io(&cfg.output_dir, e))?;
    let path = cfg.output_dir.join("logits.csv");
    let n = export_logits(&spec, &params, &data.split.test, &path)?;
    Ok((path, n))
}

/// Random logits for a balanced, fully confident batch.
pub fn bench_batch(n: usize, k: usize, seed: u64) -> (Tensor, Vec<usize>) {
    let labels = bench::balanced_labels(n, k);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut r = rng::stream(seed, &[n as u64, k as u64]);
    let data = (0..n * k).map(|_| normal.sample(&mut r)).collect();
    (Tensor::matrix(n, k, data), labels)
}

/// Times every ranking variant for each configured batch size and writes `bench.csv`.
pub fn run_bench(cfg: &ExperimentConfig) -> Result<(PathBuf, Vec<BenchRecord>)> {
    let mut records = Vec::new();
    for &n in &cfg.bench.sizes {
        let (logits, labels) = bench_batch(n, cfg.bench.classes, cfg.seed);
        for v in RankingVariant::ALL {
            let mut r = bench::time_loss_variant(v, &logits, &labels, &cfg.objective.ranking, cfg.bench.repetitions)?;
            r.class_count = cfg.bench.classes;
            records.push(r);
        }
    }
    std::fs::create_dir_all(&cfg.output_dir).map_err(|e| Error::io(&cfg.output_dir, e))?;
    let path = cfg.output_dir.join("bench.csv");
    let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
    bench::write_bench_csv(file, &records)?;
    Ok((path, records))
}

/// Triplet census for balanced batches of each configured size.
pub fn run_census(cfg: &ExperimentConfig) -> Result<Vec<(usize, TripletCensus)>> {
    let k = cfg.bench.classes;
    bench::census_scaling(&cfg.bench.sizes, |n| bench::balanced_labels(n, k))
}

pub fn write_census(mut w: impl Write, k: usize, rows: &[(usize, TripletCensus)]) -> std::io::Result<()> {
    writeln!(w, "batch_size,class_count,batch_all,batch_hard,batch_mean,pairwise_terms")?;
    for (n, c) in rows {
        writeln!(
            w,
            "{n},{k},{},{},{},{}",
            c.batch_all_triplets, c.batch_hard_triplets, c.batch_mean_triplets, c.pairwise_terms
        )?;
    }
    Ok(())
}

pub fn census_of(labels: &[usize]) -> TripletCensus {
    ranking::count_triplets(labels)
}
