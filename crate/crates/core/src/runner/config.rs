//! Flat `key = value` experiment configuration with `#` comments.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::augment::{AugmentPolicy, Transform, VectorAugmentConfig};
use crate::data::{MeanLayout, SyntheticSpec};
use crate::error::{Error, Result};
use crate::model::{ModelKind, ModelSpec};
use crate::objective::ObjectiveConfig;
use crate::optim;
use crate::ranking::{PositiveNormalization, RankingVariant};

/// Overrides `output_dir` when set.
pub const OUTPUT_DIR_ENV: &str = "RANKMATCH_OUTPUT_DIR";

#[derive(Debug, Clone, PartialEq)]
pub enum DatasetSource {
    Synthetic(SyntheticSpec),
    SyntheticFile(PathBuf),
    Cifar10 { dir: PathBuf, validation_size: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub sizes: Vec<usize>,
    pub classes: usize,
    pub repetitions: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub dataset: DatasetSource,
    pub num_labels: usize,
    pub model: ModelKind,
    pub hidden: Vec<usize>,
    pub conv_widths: [usize; 3],
    pub objective: ObjectiveConfig,
    pub batch_size: usize,
    pub mu: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub ema_decay: f64,
    pub epochs: usize,
    /// Zero means `ceil(n_unlabeled / μB)`.
    pub steps_per_epoch: usize,
    /// Zero means once per epoch.
    pub eval_every: usize,
    pub seed: u64,
    pub vector_augment: VectorAugmentConfig,
    pub pad: usize,
    pub cutout: usize,
    pub flip: bool,
    pub transforms: Vec<Transform>,
    /// Multiplies every input sample.
    pub input_scale: f64,
    pub output_dir: PathBuf,
    pub log_wall_time: bool,
    pub bench: BenchConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: DatasetSource::Synthetic(SyntheticSpec::dense_blobs(4, 16, 3.0, 1.0, [1000, 100, 500], 0)),
            num_labels: 40,
            model: ModelKind::Mlp,
            hidden: vec![32],
            conv_widths: [16, 32, 64],
            objective: ObjectiveConfig::default(),
            batch_size: 64,
            mu: 7,
            lr: optim::DEFAULT_LR,
            momentum: optim::DEFAULT_MOMENTUM,
            weight_decay: optim::DEFAULT_WEIGHT_DECAY,
            ema_decay: optim::DEFAULT_EMA_DECAY,
            epochs: 10,
            steps_per_epoch: 0,
            eval_every: 0,
            seed: 0,
            vector_augment: VectorAugmentConfig::default(),
            pad: 4,
            cutout: 16,
            flip: true,
            transforms: Transform::ALL.to_vec(),
            input_scale: 1.0,
            output_dir: PathBuf::from("runs"),
            log_wall_time: false,
            bench: BenchConfig {
                sizes: vec![8, 16, 24, 32, 40, 48, 56, 64],
                classes: 10,
                repetitions: 7,
            },
        }
    }
}

struct Entries {
    map: HashMap<String, (usize, String)>,
}

impl Entries {
    fn take(&mut self, key: &str) -> Option<(usize, String)> {
        self.map.remove(key)
    }

    fn parse<T: FromStr>(&mut self, key: &str, slot: &mut T) -> Result<()> {
        if let Some((line, v)) = self.take(key) {
            *slot = v
                .parse()
                .map_err(|_| Error::Config(format!("line {line}: cannot parse `{key}` from `{v}`")))?;
        }
        Ok(())
    }

    fn list<T: FromStr>(&mut self, key: &str) -> Result<Option<Vec<T>>> {
        let Some((line, v)) = self.take(key) else {
            return Ok(None);
        };
        v.split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse()
                    .map_err(|_| Error::Config(format!("line {line}: bad item `{s}` in `{key}`")))
            })
            .collect::<Result<Vec<T>>>()
            .map(Some)
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut map = HashMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
            let k = k.trim().to_string();
            if map.insert(k.clone(), (i + 1, v.trim().to_string())).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key `{k}`", i + 1)));
            }
        }
        let mut e = Entries { map };
        let mut c = ExperimentConfig::default();

        e.parse("seed", &mut c.seed)?;
        let dataset_kind = e.take("dataset").map_or("synthetic".to_string(), |(_, v)| v);
        let mut syn_classes = 4usize;
        let mut syn_dims = 16usize;
        let mut separation = 3.0f64;
        let mut stdev = 1.0f64;
        let mut per_class = [1000usize, 100, 500];
        let mut syn_seed = c.seed;
        let mut layout = MeanLayout::Dense;
        e.parse("synthetic.layout", &mut layout)?;
        e.parse("synthetic.classes", &mut syn_classes)?;
        e.parse("synthetic.dims", &mut syn_dims)?;
        e.parse("synthetic.separation", &mut separation)?;
        e.parse("synthetic.stdev", &mut stdev)?;
        e.parse("synthetic.train_per_class", &mut per_class[0])?;
        e.parse("synthetic.validation_per_class", &mut per_class[1])?;
        e.parse("synthetic.test_per_class", &mut per_class[2])?;
        e.parse("synthetic.seed", &mut syn_seed)?;
        let mut validation_size = 5000usize;
        e.parse("validation_size", &mut validation_size)?;
        c.dataset = match dataset_kind.as_str() {
            "synthetic" => DatasetSource::Synthetic(
                SyntheticSpec::blobs(syn_classes, syn_dims, separation, stdev, per_class, syn_seed)
                    .with_layout(layout, separation),
            ),
            "synthetic-file" => {
                let (_, p) = e
                    .take("synthetic_path")
                    .ok_or_else(|| Error::Config("dataset = synthetic-file needs synthetic_path".into()))?;
                DatasetSource::SyntheticFile(PathBuf::from(p))
            }
            "cifar10" => {
                let (_, p) = e
                    .take("cifar10_path")
                    .ok_or_else(|| Error::Config("dataset = cifar10 needs cifar10_path".into()))?;
                DatasetSource::Cifar10 {
                    dir: PathBuf::from(p),
                    validation_size,
                }
            }
            other => return Err(Error::Config(format!("unknown dataset `{other}`"))),
        };
        if matches!(c.dataset, DatasetSource::Cifar10 { .. }) {
            c.model = ModelKind::MiniConv;
        }

        e.parse("num_labels", &mut c.num_labels)?;
        e.parse("model", &mut c.model)?;
        if let Some(h) = e.list("hidden")? {
            c.hidden = h;
        }
        if let Some(w) = e.list::<usize>("conv_widths")? {
            c.conv_widths = w
                .try_into()
                .map_err(|_| Error::Config("conv_widths needs exactly 3 values".into()))?;
        }

        if let Some((line, v)) = e.take("variant") {
            c.objective.variant = match v.as_str() {
                "none" => None,
                s => Some(
                    s.parse::<RankingVariant>()
                        .map_err(|err| Error::Config(format!("line {line}: {err}")))?,
                ),
            };
        }
        e.parse("batch_size", &mut c.batch_size)?;
        e.parse("mu", &mut c.mu)?;
        e.parse("tau", &mut c.objective.tau)?;
        e.parse("margin", &mut c.objective.ranking.margin)?;
        e.parse("temperature", &mut c.objective.ranking.temperature)?;
        e.parse("soft_margin", &mut c.objective.ranking.soft_margin)?;
        e.parse("lambda_u", &mut c.objective.lambda_u)?;
        e.parse("lambda_r", &mut c.objective.lambda_r)?;
        e.parse("normalize", &mut c.objective.normalize)?;
        e.parse("mask_ranking", &mut c.objective.ranking.apply_confidence_mask)?;
        e.parse::<PositiveNormalization>("positive_normalization", &mut c.objective.ranking.positive_normalization)?;

        e.parse("lr", &mut c.lr)?;
        e.parse("momentum", &mut c.momentum)?;
        e.parse("weight_decay", &mut c.weight_decay)?;
        e.parse("ema_decay", &mut c.ema_decay)?;
        e.parse("epochs", &mut c.epochs)?;
        e.parse("steps_per_epoch", &mut c.steps_per_epoch)?;
        e.parse("eval_every", &mut c.eval_every)?;

        e.parse("sigma_weak", &mut c.vector_augment.sigma_weak)?;
        e.parse("sigma_strong", &mut c.vector_augment.sigma_strong)?;
        e.parse("drop_fraction", &mut c.vector_augment.drop_fraction)?;
        e.parse("pad", &mut c.pad)?;
        e.parse("cutout", &mut c.cutout)?;
        e.parse("flip", &mut c.flip)?;
        if let Some(t) = e.list::<Transform>("transforms")? {
            c.transforms = t;
        }
        e.parse("input_scale", &mut c.input_scale)?;
        if let Some((_, p)) = e.take("output_dir") {
            c.output_dir = PathBuf::from(p);
        }
        e.parse("log_wall_time", &mut c.log_wall_time)?;

        if let Some(s) = e.list("bench.sizes")? {
            c.bench.sizes = s;
        }
        e.parse("bench.classes", &mut c.bench.classes)?;
        e.parse("bench.repetitions", &mut c.bench.repetitions)?;

        if let Some((key, (line, _))) = e.map.iter().min_by_key(|(_, (l, _))| *l) {
            return Err(Error::Config(format!("line {line}: unknown key `{key}`")));
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Applies the [`OUTPUT_DIR_ENV`] override if the variable is set and non-empty.
    pub fn with_env_override(mut self) -> Self {
        if let Some(dir) = std::env::var_os(OUTPUT_DIR_ENV).filter(|v| !v.is_empty()) {
            self.output_dir = PathBuf::from(dir);
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.objective.validate()?;
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 || self.mu == 0 {
            return bad("batch_size and mu must be at least 1".into());
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return bad(format!("ema_decay must be in [0, 1), got {}", self.ema_decay));
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be >= 0".into());
        }
        let va = &self.vector_augment;
        if !(va.sigma_weak >= 0.0 && va.sigma_strong >= 0.0 && (0.0..=1.0).contains(&va.drop_fraction)) {
            return bad("vector augmentation needs sigmas >= 0 and drop_fraction in [0, 1]".into());
        }
        if !(self.input_scale.is_finite() && self.input_scale > 0.0) {
            return bad("input_scale must be positive".into());
        }
        if self.hidden.contains(&0) || self.conv_widths.contains(&0) {
            return bad("layer widths must be positive".into());
        }
        if self.bench.repetitions < crate::bench::MIN_REPETITIONS || self.bench.sizes.is_empty() || self.bench.classes == 0 {
            return bad("bench needs sizes, classes >= 1 and repetitions >= 5".into());
        }
        if let DatasetSource::Synthetic(s) = &self.dataset {
            s.validate()?;
        }
        Ok(())
    }

    pub fn model_spec(&self, input_dims: usize, num_classes: usize) -> Result<ModelSpec> {
        let spec = match self.model {
            ModelKind::Mlp => ModelSpec::mlp(input_dims, &self.hidden, num_classes),
            ModelKind::MiniConv => {
                let side = ((input_dims / 3) as f64).sqrt() as usize;
                if 3 * side * side != input_dims {
                    return Err(Error::Config(format!(
                        "mini-conv needs 3×s×s inputs, got {input_dims} features"
                    )));
                }
                ModelSpec::mini_conv(3, side, side, self.conv_widths, num_classes)
            }
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn weak_policy(&self) -> AugmentPolicy {
        let mut p = AugmentPolicy::weak();
        p.pad = self.pad;
        p.rng_seed = self.seed;
        if !self.flip {
            p = p.without_flip();
        }
        p
    }

    pub fn strong_policy(&self) -> AugmentPolicy {
        let mut p = AugmentPolicy::strong();
        p.cutout_size = self.cutout;
        p.transforms = self.transforms.clone();
        p.rng_seed = self.seed;
        p
    }

    /// The configuration as `key = value` text that [`ExperimentConfig::parse`] accepts.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let list = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        match &self.dataset {
            DatasetSource::Synthetic(spec) => {
                let sep = spec.means[0].iter().map(|v| v * v).sum::<f64>().sqrt();
                let _ = writeln!(s, "dataset = synthetic");
                let _ = writeln!(s, "synthetic.layout = {}", spec.layout);
                let _ = writeln!(s, "synthetic.classes = {}", spec.num_classes);
                let _ = writeln!(s, "synthetic.dims = {}", spec.dims);
                let _ = writeln!(s, "synthetic.separation = {sep}");
                let _ = writeln!(s, "synthetic.stdev = {}", spec.stdev);
                let _ = writeln!(s, "synthetic.train_per_class = {}", spec.train_per_class);
                let _ = writeln!(s, "synthetic.validation_per_class = {}", spec.validation_per_class);
                let _ = writeln!(s, "synthetic.test_per_class = {}", spec.test_per_class);
                let _ = writeln!(s, "synthetic.seed = {}", spec.seed);
            }
            DatasetSource::SyntheticFile(p) => {
                let _ = writeln!(s, "dataset = synthetic-file\nsynthetic_path = {}", p.display());
            }
            DatasetSource::Cifar10 { dir, validation_size } => {
                let _ = writeln!(
                    s,
                    "dataset = cifar10\ncifar10_path = {}\nvalidation_size = {validation_size}",
                    dir.display()
                );
            }
        }
        let o = &self.objective;
        let variant = o.variant.map_or("none", |v| v.code());
        let transforms: Vec<&str> = self.transforms.iter().map(|t| t.name()).collect();
        let _ = write!(
            s,
            "num_labels = {}\nmodel = {}\nhidden = {}\nconv_widths = {}\nvariant = {variant}\n\
             batch_size = {}\nmu = {}\ntau = {}\nmargin = {}\ntemperature = {}\nsoft_margin = {}\n\
             lambda_u = {}\nlambda_r = {}\nnormalize = {}\nmask_ranking = {}\npositive_normalization = {}\n\
             lr = {}\nmomentum = {}\nweight_decay = {}\nema_decay = {}\nepochs = {}\nsteps_per_epoch = {}\n\
             eval_every = {}\nseed = {}\nsigma_weak = {}\nsigma_strong = {}\ndrop_fraction = {}\npad = {}\n\
             cutout = {}\nflip = {}\ntransforms = {}\ninput_scale = {}\noutput_dir = {}\nlog_wall_time = {}\n\
             bench.sizes = {}\nbench.classes = {}\nbench.repetitions = {}\n",
            self.num_labels,
            self.model,
            list(&self.hidden),
            list(&self.conv_widths),
            self.batch_size,
            self.mu,
            o.tau,
            o.ranking.margin,
            o.ranking.temperature,
            o.ranking.soft_margin,
            o.lambda_u,
            o.lambda_r,
            o.normalize,
            o.ranking.apply_confidence_mask,
            o.ranking.positive_normalization,
            self.lr,
            self.momentum,
            self.weight_decay,
            self.ema_decay,
            self.epochs,
            self.steps_per_epoch,
            self.eval_every,
            self.seed,
            self.vector_augment.sigma_weak,
            self.vector_augment.sigma_strong,
            self.vector_augment.drop_fraction,
            self.pad,
            self.cutout,
            self.flip,
            transforms.join(","),
            self.input_scale,
            self.output_dir.display(),
            self.log_wall_time,
            list(&self.bench.sizes),
            self.bench.classes,
            self.bench.repetitions,
        );
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_reference_hyperparameters() {
        let c = ExperimentConfig::parse("").unwrap();
        assert_eq!((c.batch_size, c.mu), (64, 7));
        assert_eq!(c.objective.tau, 0.95);
        assert_eq!(c.objective.ranking.margin, 0.5);
        assert_eq!(c.objective.ranking.temperature, 0.2);
        assert_eq!((c.objective.lambda_u, c.objective.lambda_r), (1.0, 1.0));
        assert_eq!(c.objective.variant, Some(RankingVariant::BatchMean));
        assert_eq!((c.lr, c.momentum, c.weight_decay), (0.03, 0.9, 5e-4));
    }

    #[test]
    fn parses_keys_and_comments() {
        let c = ExperimentConfig::parse(
            "# run\nvariant = none # baseline\nbatch_size=8\nhidden = 16, 8\nnormalize = false\n\
             positive_normalization = positive-count\ntransforms = Identity, rotate\n",
        )
        .unwrap();
        assert_eq!(c.objective.variant, None);
        assert_eq!(c.batch_size, 8);
        assert_eq!(c.hidden, vec![16, 8]);
        assert!(!c.objective.normalize);
        assert_eq!(c.objective.ranking.positive_normalization, PositiveNormalization::PositiveCount);
        assert_eq!(c.transforms, vec![Transform::Identity, Transform::Rotate]);
    }

    #[test]
    fn rejects_bad_configs() {
        for text in [
            "bogus = 1",
            "batch_size = x",
            "tau = 0",
            "tau = 1.5",
            "momentum = 1.0",
            "variant = XX",
            "no equals sign",
            "mu = 1\nmu = 2",
            "dataset = cifar10",
            "epochs = 0",
        ] {
            assert!(matches!(ExperimentConfig::parse(text), Err(Error::Config(_))), "{text}");
        }
    }

    #[test]
    fn text_round_trip() {
        let c = ExperimentConfig::parse("variant = CT\nseed = 4\nlr = 0.1\nflip = false\n").unwrap();
        assert_eq!(ExperimentConfig::parse(&c.to_text()).unwrap(), c);
    }
}
