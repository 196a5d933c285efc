//! The training loop: augment, objective, backward, SGD step, EMA update and
//! periodic evaluation of the EMA model.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use crate::augment::{BatchPipeline, StreamAugmenter};
use crate::data::{self, DatasetSplit, SemiSupervisedSplit};
use crate::error::{Error, Result};
use crate::model::{self, ModelParams, ModelSpec};
use crate::objective::{self, LossBreakdown};
use crate::optim::{self, EmaState, OptimState};
use crate::runner::config::{DatasetSource, ExperimentConfig};
use crate::runner::eval::evaluate;
use crate::runner::metrics::{self, MetricsRow};
use crate::tensor::Tensor;

pub const METRICS_FILE: &str = "metrics.csv";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const CONFIG_FILE: &str = "config.txt";

#[derive(Debug, Clone)]
pub struct PreparedData {
    pub split: DatasetSplit,
    pub ssl: SemiSupervisedSplit,
}

fn scale(t: &Tensor, s: f64) -> Tensor {
    if s == 1.0 {
        t.clone()
    } else {
        t.map(|v| v * s)
    }
}

/// Loads or generates the dataset, applies `input_scale` and draws the labeled subset.
pub fn prepare_data(cfg: &ExperimentConfig) -> Result<PreparedData> {
    let mut split = match &cfg.dataset {
        DatasetSource::Synthetic(spec) => data::make_synthetic_blobs(spec)?,
        DatasetSource::SyntheticFile(p) => data::load_synthetic(p)?,
        DatasetSource::Cifar10 { dir, validation_size } => data::load_cifar10_dir(dir, *validation_size, cfg.seed)?,
    };
    if cfg.input_scale != 1.0 {
        for d in [&mut split.train, &mut split.validation, &mut split.test] {
            *d = data::Dataset::new(scale(d.samples(), cfg.input_scale), d.labels().to_vec(), d.num_classes())?;
        }
    }
    let ssl = data::split_labeled_unlabeled(&split.train, cfg.num_labels, cfg.seed)?;
    Ok(PreparedData { split, ssl })
}

/// What the per-step hook sees before the parameter update.
#[derive(Debug)]
pub struct StepReport<'a> {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub breakdown: &'a LossBreakdown,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub steps_run: usize,
    pub completed: bool,
    pub best_validation_accuracy: Option<f64>,
    pub final_validation_accuracy: Option<f64>,
    pub final_raw_validation_accuracy: Option<f64>,
    pub final_test_accuracy: Option<f64>,
    pub metrics_path: PathBuf,
}

pub struct Trainer {
    cfg: ExperimentConfig,
    data: Arc<PreparedData>,
    spec: ModelSpec,
    params: ModelParams,
    optim: OptimState,
    ema: EmaState,
    augmenter: StreamAugmenter,
    step: usize,
    steps_per_epoch: usize,
    best_validation: Option<f64>,
    rows: Vec<MetricsRow>,
    stop_after: Option<usize>,
}

impl Trainer {
    pub fn new(cfg: ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let data = Arc::new(prepare_data(&cfg)?);
        Self::with_data(cfg, data)
    }

    /// Reuses already prepared data, e.g. across runs that share a dataset.
    pub fn with_data(cfg: ExperimentConfig, data: Arc<PreparedData>) -> Result<Self> {
        cfg.validate()?;
        let train = &data.split.train;
        let spec = cfg.model_spec(train.dims(), train.num_classes())?;
        let params = model::init_params(&spec, cfg.seed)?;
        let steps_per_epoch = if cfg.steps_per_epoch > 0 {
            cfg.steps_per_epoch
        } else {
            data::steps_per_epoch(data.ssl.unlabeled.rows(), cfg.batch_size, cfg.mu)
        };
        let total = steps_per_epoch * cfg.epochs;
        let optim = OptimState::new(&params, cfg.lr, cfg.momentum, cfg.weight_decay, total)?;
        let ema = EmaState::new(&params, cfg.ema_decay)?;
        let pipeline = match spec.input {
            model::InputShape::Vector(_) => BatchPipeline::Vector(cfg.vector_augment),
            model::InputShape::Image {
                channels,
                height,
                width,
            } => BatchPipeline::Image {
                channels,
                height,
                width,
                weak: cfg.weak_policy(),
                strong: cfg.strong_policy(),
            },
        };
        let augmenter = StreamAugmenter::new(pipeline, cfg.seed);
        Ok(Trainer {
            cfg,
            data,
            spec,
            params,
            optim,
            ema,
            augmenter,
            step: 0,
            steps_per_epoch,
            best_validation: None,
            rows: Vec::new(),
            stop_after: None,
        })
    }

    /// Continues a run from a checkpoint written by [`Trainer::save_checkpoint`].
    /// Metrics rows at or beyond the checkpoint step are discarded.
    pub fn resume(cfg: ExperimentConfig, checkpoint: &Path) -> Result<Self> {
        let mut t = Self::new(cfg)?;
        let arrays = model::load_arrays(checkpoint)?;
        t.params = model::params_from_arrays(&t.spec, &arrays, "params")?;
        t.ema = EmaState::from_shadow(model::params_from_arrays(&t.spec, &arrays, "ema")?, t.cfg.ema_decay)?;
        let velocity = model::params_from_arrays(&t.spec, &arrays, "velocity")?;
        t.optim.set_velocities(velocity.into_named())?;
        let meta = |name: &str| -> Result<f64> {
            arrays
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, v)| v.item())
                .ok_or_else(|| Error::InvalidArgument(format!("checkpoint lacks `{name}`")))
        };
        t.step = meta("meta/step")? as usize;
        t.optim.step = t.step;
        let best = meta("meta/best_validation")?;
        t.best_validation = (best >= 0.0).then_some(best);
        let metrics_path = t.cfg.output_dir.join(METRICS_FILE);
        if metrics_path.exists() {
            let step = t.step;
            t.rows = metrics::load_metrics(&metrics_path)?
                .into_iter()
                .filter(|r| r.step < step)
                .collect();
        }
        Ok(t)
    }

    /// Stops (with a checkpoint) once this many steps have completed in total.
    pub fn stop_after(mut self, steps: usize) -> Self {
        self.stop_after = Some(steps);
        self
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn ema(&self) -> &EmaState {
        &self.ema
    }

    pub fn data(&self) -> &PreparedData {
        &self.data
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.steps_per_epoch
    }

    pub fn total_steps(&self) -> usize {
        self.steps_per_epoch * self.cfg.epochs
    }

    pub fn rows(&self) -> &[MetricsRow] {
        &self.rows
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut arrays = model::params_to_arrays(&self.params, "params");
        arrays.extend(model::params_to_arrays(self.ema.shadow(), "ema"));
        arrays.extend(
            self.optim
                .velocities()
                .iter()
                .map(|(n, t)| (format!("velocity/{n}"), t.clone())),
        );
        arrays.push(("meta/step".into(), Tensor::scalar(self.step as f64)));
        arrays.push((
            "meta/best_validation".into(),
            Tensor::scalar(self.best_validation.unwrap_or(-1.0)),
        ));
        model::save_arrays(path, &arrays)
    }

    fn eval_due(&self, completed: usize) -> bool {
        let every = if self.cfg.eval_every > 0 { self.cfg.eval_every } else { self.steps_per_epoch };
        completed.is_multiple_of(every) || completed == self.total_steps()
    }

    fn write_metrics(&self) -> Result<()> {
        if self.rows.is_empty() {
            return Ok(());
        }
        metrics::emit_metrics(&self.rows, &self.cfg.output_dir.join(METRICS_FILE))
    }

    fn abort(&self, step: usize) -> Error {
        // keep whatever was logged before the failure
        if let Err(e) = self.write_metrics() {
            return e;
        }
        Error::NonFiniteLoss { step }
    }

    pub fn run(&mut self) -> Result<TrainOutcome> {
        self.run_with(|_| Ok(()))
    }

    pub fn run_with(&mut self, mut hook: impl FnMut(&StepReport) -> Result<()>) -> Result<TrainOutcome> {
        let out = self.cfg.output_dir.clone();
        fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
        fs::write(out.join(CONFIG_FILE), self.cfg.to_text()).map_err(|e| Error::io(out.join(CONFIG_FILE), e))?;
        let data = Arc::clone(&self.data);
        let total = self.total_steps();
        let mut last_eval: (Option<f64>, Option<f64>, Option<f64>) = (None, None, None);

        while self.step < total {
            let epoch = self.step / self.steps_per_epoch;
            let batches = data::batch_iterator_with_steps(
                &data.ssl.labeled,
                &data.ssl.unlabeled,
                self.cfg.batch_size,
                self.cfg.mu,
                self.cfg.seed,
                epoch as u64,
                self.steps_per_epoch,
            )?;
            while self.step < total && self.step / self.steps_per_epoch == epoch {
                let started = Instant::now();
                let step = self.step;
                let (lb, ub) = batches.get(step % self.steps_per_epoch)?;
                let lr = optim::cosine_lr(step, total, self.cfg.lr)?;
                self.augmenter.set_step(step as u64);
                let mut obj =
                    objective::total_loss(&lb, &ub, &self.spec, &self.params, &mut self.augmenter, &self.cfg.objective)?;
                let b = obj.breakdown;
                if !b.is_finite() {
                    return Err(self.abort(step));
                }
                hook(&StepReport {
                    step,
                    epoch,
                    lr,
                    breakdown: &b,
                })?;
                let grads = obj.gradients()?;
                match optim::sgd_nesterov_step(&mut self.params, &grads, &mut self.optim, lr) {
                    Err(Error::NonFiniteGradient(_)) => return Err(self.abort(step)),
                    r => r?,
                }
                if self.params.iter().any(|(_, t)| !t.is_finite()) {
                    return Err(self.abort(step));
                }
                optim::ema_update(&mut self.ema, &self.params)?;
                self.step += 1;

                let mut row = MetricsRow {
                    step,
                    epoch,
                    lr,
                    supervised_ce: b.supervised_ce,
                    unsupervised_ce: b.unsupervised_ce,
                    supervised_rank: b.supervised_rank,
                    unsupervised_rank: b.unsupervised_rank,
                    total: b.total,
                    confident_fraction: b.confident_fraction,
                    max_pairwise_distance: b.max_pairwise_distance,
                    ..Default::default()
                };
                if self.eval_due(self.step) {
                    let shadow = self.ema.shadow();
                    let val = evaluate(&self.spec, shadow, &data.split.validation)?.accuracy;
                    let test = evaluate(&self.spec, shadow, &data.split.test)?.accuracy;
                    let raw = evaluate(&self.spec, &self.params, &data.split.validation)?.accuracy;
                    row.train_accuracy = Some(evaluate(&self.spec, shadow, &data.split.train)?.accuracy);
                    row.validation_accuracy = Some(val);
                    row.test_accuracy = Some(test);
                    row.raw_validation_accuracy = Some(raw);
                    last_eval = (Some(val), Some(raw), Some(test));
                    if self.best_validation.is_none_or(|best| val > best) {
                        self.best_validation = Some(val);
                        self.save_checkpoint(&out.join(BEST_CHECKPOINT))?;
                    }
                }
                if self.cfg.log_wall_time {
                    row.wall_time_ns = started.elapsed().as_nanos() as u64;
                }
                self.rows.push(row);

                if self.stop_after == Some(self.step) && self.step < total {
                    self.save_checkpoint(&out.join(LAST_CHECKPOINT))?;
                    self.write_metrics()?;
                    return Ok(self.outcome(false, last_eval));
                }
            }
        }
        self.save_checkpoint(&out.join(LAST_CHECKPOINT))?;
        if self.rows.is_empty() {
            return Err(Error::InvalidArgument("run produced no steps".into()));
        }
        self.write_metrics()?;
        Ok(self.outcome(true, last_eval))
    }

    fn outcome(&self, completed: bool, last: (Option<f64>, Option<f64>, Option<f64>)) -> TrainOutcome {
        TrainOutcome {
            steps_run: self.step,
            completed,
            best_validation_accuracy: self.best_validation,
            final_validation_accuracy: last.0,
            final_raw_validation_accuracy: last.1,
            final_test_accuracy: last.2,
            metrics_path: self.cfg.output_dir.join(METRICS_FILE),
        }
    }
}

/// Parameters stored in a checkpoint, preferring the EMA copy.
pub fn load_eval_params(spec: &ModelSpec, checkpoint: &Path) -> Result<ModelParams> {
    let arrays = model::load_arrays(checkpoint)?;
    if arrays.iter().any(|(n, _)| n.starts_with("ema/")) {
        model::params_from_arrays(spec, &arrays, "ema")
    } else {
        model::params_from_arrays(spec, &arrays, "params")
    }
}
