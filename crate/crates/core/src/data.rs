//! CIFAR-10 binary ingestion, synthetic Gaussian blobs, the labeled/unlabeled
//! split and the per-epoch batch schedule.

use std::fs;
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand_distr::{Distribution, Normal};

use crate::augment::ImageTensor;
use crate::error::{Error, Result};
use crate::objective::{LabeledBatch, UnlabeledBatch};
use crate::rng;
use crate::tensor::Tensor;

pub const CIFAR10_RECORD_BYTES: usize = 3073;
pub const CIFAR10_CLASSES: usize = 10;
pub const CIFAR10_SIDE: usize = 32;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Cifar10Record {
    pub label: u8,
    /// Red, green and blue planes, each 32×32 row-major.
    pub pixels: Vec<u8>,
}

impl Cifar10Record {
    pub fn image(&self) -> ImageTensor {
        ImageTensor::new(
            3,
            CIFAR10_SIDE,
            CIFAR10_SIDE,
            self.pixels.iter().map(|&b| b as f64 / 255.0).collect(),
        )
        .expect("record holds 3072 pixels")
    }
}

pub fn parse_cifar10_binary(bytes: &[u8]) -> Result<Vec<Cifar10Record>> {
    let whole = bytes.len() / CIFAR10_RECORD_BYTES * CIFAR10_RECORD_BYTES;
    if whole != bytes.len() {
        return Err(Error::Format {
            offset: whole,
            detail: format!(
                "{} trailing bytes; length must be a multiple of {CIFAR10_RECORD_BYTES}",
                bytes.len() - whole
            ),
        });
    }
    bytes
        .chunks_exact(CIFAR10_RECORD_BYTES)
        .enumerate()
        .map(|(i, rec)| {
            if rec[0] as usize >= CIFAR10_CLASSES {
                return Err(Error::BadLabel { record: i, label: rec[0] });
            }
            Ok(Cifar10Record {
                label: rec[0],
                pixels: rec[1..].to_vec(),
            })
        })
        .collect()
}

pub fn encode_cifar10_binary(records: &[Cifar10Record]) -> Vec<u8> {
    let mut out = Vec::with_capacity(records.len() * CIFAR10_RECORD_BYTES);
    for r in records {
        out.push(r.label);
        out.extend_from_slice(&r.pixels);
    }
    out
}

pub fn read_cifar10_file(path: &Path) -> Result<Vec<Cifar10Record>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_cifar10_binary(&bytes)
}

/// Samples as rows plus integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    samples: Tensor,
    labels: Vec<usize>,
    num_classes: usize,
}

impl Dataset {
    pub fn new(samples: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if samples.shape().len() != 2 || samples.rows() != labels.len() {
            return Err(Error::InvalidArgument(format!(
                "samples {:?} vs {} labels",
                samples.shape(),
                labels.len()
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::InvalidArgument(format!("label {l} >= {num_classes}")));
        }
        Ok(Dataset {
            samples,
            labels,
            num_classes,
        })
    }

    pub fn from_cifar10(records: &[Cifar10Record]) -> Self {
        let mut data = Vec::with_capacity(records.len() * 3072);
        for r in records {
            data.extend(r.pixels.iter().map(|&b| b as f64 / 255.0));
        }
        Dataset {
            samples: Tensor::matrix(records.len(), 3072, data),
            labels: records.iter().map(|r| r.label as usize).collect(),
            num_classes: CIFAR10_CLASSES,
        }
    }

    pub fn samples(&self) -> &Tensor {
        &self.samples
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn dims(&self) -> usize {
        self.samples.cols()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn select(&self, indices: &[usize]) -> Dataset {
        Dataset {
            samples: self.samples.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.num_classes];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub train: Dataset,
    pub validation: Dataset,
    pub test: Dataset,
}

/// Carves a seeded validation subset out of the training records.
pub fn cifar10_split(
    train: &[Cifar10Record],
    test: &[Cifar10Record],
    validation_size: usize,
    seed: u64,
) -> Result<DatasetSplit> {
    if validation_size >= train.len() {
        return Err(Error::InvalidArgument(format!(
            "validation size {validation_size} leaves no training data out of {}",
            train.len()
        )));
    }
    let all = Dataset::from_cifar10(train);
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut rng::stream(seed, &[VALIDATION_TAG]));
    let (val, tr) = order.split_at(validation_size);
    let (mut val, mut tr) = (val.to_vec(), tr.to_vec());
    val.sort_unstable();
    tr.sort_unstable();
    Ok(DatasetSplit {
        train: all.select(&tr),
        validation: all.select(&val),
        test: Dataset::from_cifar10(test),
    })
}

/// Reads `data_batch_{1..5}.bin` and `test_batch.bin` from a directory.
pub fn load_cifar10_dir(dir: &Path, validation_size: usize, seed: u64) -> Result<DatasetSplit> {
    let mut train = Vec::new();
    for i in 1..=5 {
        train.extend(read_cifar10_file(&dir.join(format!("data_batch_{i}.bin")))?);
    }
    let test = read_cifar10_file(&dir.join("test_batch.bin"))?;
    cifar10_split(&train, &test, validation_size, seed)
}

/// Placement of the class means.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MeanLayout {
    /// One coordinate axis per class.
    #[default]
    Axis,
    /// Random unit directions, so class signal is spread over all coordinates.
    Dense,
}

impl std::str::FromStr for MeanLayout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "axis" => Ok(Self::Axis),
            "dense" => Ok(Self::Dense),
            other => Err(Error::Config(format!("unknown mean layout `{other}`"))),
        }
    }
}

impl std::fmt::Display for MeanLayout {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Axis => "axis",
            Self::Dense => "dense",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub layout: MeanLayout,
    pub num_classes: usize,
    pub dims: usize,
    pub means: Vec<Vec<f64>>,
    pub stdev: f64,
    pub train_per_class: usize,
    pub validation_per_class: usize,
    pub test_per_class: usize,
    pub seed: u64,
}

impl SyntheticSpec {
    /// Class `k` is centered at `separation·(1 + ⌊k/D⌋)` along axis `k mod D`.
    pub fn blobs(num_classes: usize, dims: usize, separation: f64, stdev: f64, per_class: [usize; 3], seed: u64) -> Self {
        let means = (0..num_classes)
            .map(|k| {
                let mut m = vec![0.0; dims.max(1)];
                m[k % dims.max(1)] = separation * (1 + k / dims.max(1)) as f64;
                m
            })
            .collect();
        SyntheticSpec {
            layout: MeanLayout::Axis,
            num_classes,
            dims,
            means,
            stdev,
            train_per_class: per_class[0],
            validation_per_class: per_class[1],
            test_per_class: per_class[2],
            seed,
        }
    }

    /// Class `k` is centered at `separation·u_k` for a random unit vector `u_k`.
    pub fn dense_blobs(
        num_classes: usize,
        dims: usize,
        separation: f64,
        stdev: f64,
        per_class: [usize; 3],
        seed: u64,
    ) -> Self {
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let means = (0..num_classes)
            .map(|k| {
                let mut r = rng::stream(seed, &[MEANS_TAG, k as u64]);
                let mut u: Vec<f64> = (0..dims).map(|_| normal.sample(&mut r)).collect();
                let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
                u.iter_mut().for_each(|v| *v *= separation / norm);
                u
            })
            .collect();
        SyntheticSpec {
            layout: MeanLayout::Dense,
            means,
            ..Self::blobs(num_classes, dims, separation, stdev, per_class, seed)
        }
    }

    pub fn with_layout(self, layout: MeanLayout, separation: f64) -> Self {
        let per_class = [self.train_per_class, self.validation_per_class, self.test_per_class];
        match layout {
            MeanLayout::Axis => Self::blobs(self.num_classes, self.dims, separation, self.stdev, per_class, self.seed),
            MeanLayout::Dense => {
                Self::dense_blobs(self.num_classes, self.dims, separation, self.stdev, per_class, self.seed)
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.dims == 0 {
            return Err(Error::Config("synthetic data needs K >= 2 and D >= 1".into()));
        }
        if self.means.len() != self.num_classes || self.means.iter().any(|m| m.len() != self.dims) {
            return Err(Error::Config("synthetic means must be K vectors of length D".into()));
        }
        if self.train_per_class == 0 || self.validation_per_class == 0 || self.test_per_class == 0 {
            return Err(Error::Config("synthetic split counts must be positive".into()));
        }
        if !(self.stdev >= 0.0 && self.stdev.is_finite()) {
            return Err(Error::Config("synthetic stdev must be finite and non-negative".into()));
        }
        Ok(())
    }
}

const VALIDATION_TAG: u64 = 0x0076_616c;
const BLOB_TAG: u64 = 0x626c_6f62;
const MEANS_TAG: u64 = 0x6d65_616e;
const LABEL_TAG: u64 = 0x006c_6162;
const LABELED_ORDER_TAG: u64 = 0x6c6f_7264;
const UNLABELED_ORDER_TAG: u64 = 0x756f_7264;

fn blob_split(spec: &SyntheticSpec, split: u64, per_class: usize) -> Dataset {
    let normal = Normal::new(0.0, spec.stdev).expect("validated stdev");
    let n = per_class * spec.num_classes;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(spec.seed, &[BLOB_TAG, split]));
    let mut data = vec![0.0; n * spec.dims];
    let mut labels = vec![0; n];
    for k in 0..spec.num_classes {
        for i in 0..per_class {
            let slot = order[k * per_class + i];
            let mut r = rng::stream(spec.seed, &[BLOB_TAG, split, k as u64, i as u64]);
            labels[slot] = k;
            for (d, &m) in spec.means[k].iter().enumerate() {
                data[slot * spec.dims + d] = m + normal.sample(&mut r);
            }
        }
    }
    Dataset {
        samples: Tensor::matrix(n, spec.dims, data),
        labels,
        num_classes: spec.num_classes,
    }
}

/// Isotropic Gaussian samples around each class mean, rows shuffled per split.
pub fn make_synthetic_blobs(spec: &SyntheticSpec) -> Result<DatasetSplit> {
    spec.validate()?;
    Ok(DatasetSplit {
        train: blob_split(spec, 0, spec.train_per_class),
        validation: blob_split(spec, 1, spec.validation_per_class),
        test: blob_split(spec, 2, spec.test_per_class),
    })
}

const SYNTHETIC_MAGIC: &[u8; 8] = b"RKMSYNTH";
pub const SYNTHETIC_VERSION: u32 = 1;

/// Header `magic, version, K, D, n_train, n_val, n_test`; then per split a
/// `u32` label column followed by `D` feature columns of little-endian `f64`.
pub fn encode_synthetic(split: &DatasetSplit) -> Vec<u8> {
    let parts = [&split.train, &split.validation, &split.test];
    let mut out = Vec::new();
    out.extend_from_slice(SYNTHETIC_MAGIC);
    out.extend_from_slice(&SYNTHETIC_VERSION.to_le_bytes());
    out.extend_from_slice(&(split.train.num_classes as u32).to_le_bytes());
    out.extend_from_slice(&(split.train.dims() as u32).to_le_bytes());
    for p in parts {
        out.extend_from_slice(&(p.len() as u64).to_le_bytes());
    }
    for p in parts {
        for &l in &p.labels {
            out.extend_from_slice(&(l as u32).to_le_bytes());
        }
        for d in 0..p.dims() {
            for r in 0..p.len() {
                out.extend_from_slice(&p.samples.get2(r, d).to_le_bytes());
            }
        }
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.pos,
                detail: format!("need {n} bytes, {} left", self.buf.len() - self.pos),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode_synthetic(buf: &[u8]) -> Result<DatasetSplit> {
    let mut c = Cursor { buf, pos: 0 };
    if c.take(8)? != SYNTHETIC_MAGIC {
        return Err(Error::Format {
            offset: 0,
            detail: "not a synthetic dataset file".into(),
        });
    }
    let version = c.u32()?;
    if version != SYNTHETIC_VERSION {
        return Err(Error::Format {
            offset: 8,
            detail: format!("unsupported version {version}"),
        });
    }
    let k = c.u32()? as usize;
    let d = c.u32()? as usize;
    let counts = [c.u64()? as usize, c.u64()? as usize, c.u64()? as usize];
    let mut parts = Vec::with_capacity(3);
    for n in counts {
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let at = c.pos;
            let l = c.u32()? as usize;
            if l >= k {
                return Err(Error::Format {
                    offset: at,
                    detail: format!("label {l} >= {k}"),
                });
            }
            labels.push(l);
        }
        let mut data = vec![0.0; n * d];
        for col in 0..d {
            for r in 0..n {
                data[r * d + col] = c.f64()?;
            }
        }
        parts.push(Dataset::new(Tensor::matrix(n, d, data), labels, k)?);
    }
    if c.pos != buf.len() {
        return Err(Error::Format {
            offset: c.pos,
            detail: "trailing bytes".into(),
        });
    }
    let test = parts.pop().expect("three parts");
    let validation = parts.pop().expect("three parts");
    let train = parts.pop().expect("three parts");
    Ok(DatasetSplit { train, validation, test })
}

pub fn save_synthetic(path: &Path, split: &DatasetSplit) -> Result<()> {
    fs::write(path, encode_synthetic(split)).map_err(|e| Error::io(path, e))
}

pub fn load_synthetic(path: &Path) -> Result<DatasetSplit> {
    decode_synthetic(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SemiSupervisedSplit {
    pub labeled: Dataset,
    /// Sorted indices into the training set.
    pub labeled_indices: Vec<usize>,
    /// Every training sample, labeled ones included.
    pub unlabeled: Tensor,
}

/// Draws `num_labels / K` labeled samples per class; labels of the rest are
/// discarded but all samples stay in the unlabeled pool.
pub fn split_labeled_unlabeled(train: &Dataset, num_labels: usize, seed: u64) -> Result<SemiSupervisedSplit> {
    let k = train.num_classes;
    if num_labels == 0 || num_labels > train.len() || !num_labels.is_multiple_of(k) {
        return Err(Error::InvalidArgument(format!(
            "num_labels {num_labels} must be positive, at most {} and divisible by {k}",
            train.len()
        )));
    }
    let per_class = num_labels / k;
    let mut chosen = Vec::with_capacity(num_labels);
    for class in 0..k {
        let members: Vec<usize> = (0..train.len()).filter(|&i| train.labels[i] == class).collect();
        if members.len() < per_class {
            return Err(Error::InvalidArgument(format!(
                "class {class} has {} samples, {per_class} needed",
                members.len()
            )));
        }
        let mut r = rng::stream(seed, &[LABEL_TAG, class as u64]);
        chosen.extend(index::sample(&mut r, members.len(), per_class).into_iter().map(|j| members[j]));
    }
    chosen.sort_unstable();
    Ok(SemiSupervisedSplit {
        labeled: train.select(&chosen),
        labeled_indices: chosen,
        unlabeled: train.samples.clone(),
    })
}

/// `ceil(n / (μ·B))`.
pub fn steps_per_epoch(unlabeled_len: usize, labeled_batch: usize, mu: usize) -> usize {
    match labeled_batch * mu {
        0 => 0,
        m => unlabeled_len.div_ceil(m),
    }
}

/// Concatenated fresh permutations of `0..n`, keyed by `(seed, tag, epoch, round)`.
fn cycled_order(n: usize, needed: usize, seed: u64, tag: u64, epoch: u64) -> Vec<usize> {
    let mut out = Vec::with_capacity(needed + n);
    let mut round = 0u64;
    while out.len() < needed {
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng::stream(seed, &[tag, epoch, round]));
        out.extend(perm);
        round += 1;
    }
    out.truncate(needed);
    out
}

/// The batches of one epoch, addressable by step.
///
/// The unlabeled pool is visited in a fresh permutation; when its size is not
/// a multiple of `μ·B` the last batch is completed from the next permutation,
/// so every batch is full. The labeled set is cycled with reshuffling.
#[derive(Debug, Clone)]
pub struct EpochBatches<'a> {
    labeled: &'a Dataset,
    unlabeled: &'a Tensor,
    labeled_order: Vec<usize>,
    unlabeled_order: Vec<usize>,
    batch: usize,
    mu: usize,
    next: usize,
}

impl<'a> EpochBatches<'a> {
    pub fn steps(&self) -> usize {
        self.unlabeled_order.len() / (self.batch * self.mu)
    }

    pub fn labeled_indices(&self, step: usize) -> &[usize] {
        &self.labeled_order[step * self.batch..(step + 1) * self.batch]
    }

    pub fn unlabeled_indices(&self, step: usize) -> &[usize] {
        let m = self.batch * self.mu;
        &self.unlabeled_order[step * m..(step + 1) * m]
    }

    pub fn get(&self, step: usize) -> Result<(LabeledBatch, UnlabeledBatch)> {
        if step >= self.steps() {
            return Err(Error::InvalidArgument(format!("step {step} beyond epoch of {}", self.steps())));
        }
        let li = self.labeled_indices(step);
        let lb = LabeledBatch::new(
            self.labeled.samples.select_rows(li),
            &li.iter().map(|&i| self.labeled.labels[i]).collect::<Vec<_>>(),
            self.labeled.num_classes,
        )?;
        let ub = UnlabeledBatch::with_ratio(
            self.unlabeled.select_rows(self.unlabeled_indices(step)),
            self.mu,
            self.batch,
        )?;
        Ok((lb, ub))
    }
}

impl Iterator for EpochBatches<'_> {
    type Item = Result<(LabeledBatch, UnlabeledBatch)>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.next >= self.steps() {
            return None;
        }
        self.next += 1;
        Some(self.get(self.next - 1))
    }
}

pub fn batch_iterator<'a>(
    labeled: &'a Dataset,
    unlabeled: &'a Tensor,
    batch: usize,
    mu: usize,
    seed: u64,
    epoch: u64,
) -> Result<EpochBatches<'a>> {
    batch_iterator_with_steps(labeled, unlabeled, batch, mu, seed, epoch, steps_per_epoch(unlabeled.rows(), batch, mu))
}

/// Like [`batch_iterator`] with an explicit number of steps.
pub fn batch_iterator_with_steps<'a>(
    labeled: &'a Dataset,
    unlabeled: &'a Tensor,
    batch: usize,
    mu: usize,
    seed: u64,
    epoch: u64,
    steps: usize,
) -> Result<EpochBatches<'a>> {
    if batch == 0 || mu == 0 {
        return Err(Error::InvalidArgument("B and μ must be at least 1".into()));
    }
    if labeled.is_empty() || unlabeled.rows() == 0 {
        return Err(Error::InvalidArgument("labeled and unlabeled sets must be non-empty".into()));
    }
    Ok(EpochBatches {
        labeled,
        unlabeled,
        labeled_order: cycled_order(labeled.len(), steps * batch, seed, LABELED_ORDER_TAG, epoch),
        unlabeled_order: cycled_order(unlabeled.rows(), steps * batch * mu, seed, UNLABELED_ORDER_TAG, epoch),
        batch,
        mu,
        next: 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn records(n: usize) -> Vec<Cifar10Record> {
        (0..n)
            .map(|i| Cifar10Record {
                label: (i % 10) as u8,
                pixels: (0..3072).map(|j| ((i * 7 + j * 13) % 256) as u8).collect(),
            })
            .collect()
    }

    #[test]
    fn cifar_round_trip() {
        let recs = records(2);
        let bytes = encode_cifar10_binary(&recs);
        assert_eq!(bytes.len(), 6146);
        let parsed = parse_cifar10_binary(&bytes).unwrap();
        assert_eq!(parsed, recs);
        let img = parsed[1].image();
        assert_eq!(img.get(0, 0, 1), recs[1].pixels[1] as f64 / 255.0);
        assert_eq!(img.get(2, 31, 31), recs[1].pixels[3071] as f64 / 255.0);
    }

    #[test]
    fn cifar_rejects_bad_input() {
        let mut bytes = encode_cifar10_binary(&records(2));
        bytes[0] = 7;
        assert_eq!(parse_cifar10_binary(&bytes).unwrap()[0].label, 7);
        bytes.push(0);
        assert!(matches!(parse_cifar10_binary(&bytes), Err(Error::Format { offset: 6146, .. })));
        bytes.pop();
        bytes[3073] = 10;
        assert!(matches!(
            parse_cifar10_binary(&bytes),
            Err(Error::BadLabel { record: 1, label: 10 })
        ));
    }

    #[test]
    fn zero_stdev_blobs_sit_on_means() {
        let spec = SyntheticSpec::blobs(3, 4, 2.0, 0.0, [5, 2, 2], 1);
        let s = make_synthetic_blobs(&spec).unwrap();
        for r in 0..s.train.len() {
            assert_eq!(s.train.samples().row(r), spec.means[s.train.labels()[r]].as_slice());
        }
        assert_eq!(s.train.class_counts(), vec![5, 5, 5]);
        assert_eq!(make_synthetic_blobs(&spec).unwrap(), s);
    }

    #[test]
    fn blob_means_are_close() {
        let spec = SyntheticSpec::blobs(2, 3, 1.0, 0.5, [400, 1, 1], 9);
        let s = make_synthetic_blobs(&spec).unwrap();
        for k in 0..2 {
            let rows: Vec<usize> = (0..s.train.len()).filter(|&i| s.train.labels()[i] == k).collect();
            for d in 0..3 {
                let mean = rows.iter().map(|&r| s.train.samples().get2(r, d)).sum::<f64>() / rows.len() as f64;
                assert!((mean - spec.means[k][d]).abs() < 3.0 * 0.5 / (rows.len() as f64).sqrt());
            }
        }
    }

    #[test]
    fn synthetic_file_round_trip() {
        let s = make_synthetic_blobs(&SyntheticSpec::blobs(3, 2, 1.0, 0.3, [4, 2, 3], 2)).unwrap();
        let bytes = encode_synthetic(&s);
        assert_eq!(decode_synthetic(&bytes).unwrap(), s);
        assert!(decode_synthetic(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(1);
        assert!(decode_synthetic(&extra).is_err());
    }

    #[test]
    fn balanced_split() {
        let s = make_synthetic_blobs(&SyntheticSpec::blobs(10, 10, 1.0, 0.1, [20, 1, 1], 0)).unwrap();
        let a = split_labeled_unlabeled(&s.train, 40, 1).unwrap();
        assert_eq!(a.labeled.class_counts(), vec![4; 10]);
        assert_eq!(a.unlabeled, *s.train.samples());
        let b = split_labeled_unlabeled(&s.train, 40, 2).unwrap();
        assert_ne!(a.labeled_indices, b.labeled_indices);
        assert_eq!(b.labeled.class_counts(), vec![4; 10]);

        let all = split_labeled_unlabeled(&s.train, 200, 1).unwrap();
        assert_eq!(all.labeled_indices, (0..200).collect::<Vec<_>>());

        assert!(split_labeled_unlabeled(&s.train, 41, 1).is_err());
        assert!(split_labeled_unlabeled(&s.train, 210, 1).is_err());
    }

    #[test]
    fn batches_are_full_and_deterministic() {
        let s = make_synthetic_blobs(&SyntheticSpec::blobs(2, 2, 1.0, 0.1, [25, 1, 1], 0)).unwrap();
        let split = split_labeled_unlabeled(&s.train, 2, 0).unwrap();
        let it = batch_iterator(&split.labeled, &split.unlabeled, 2, 3, 7, 0).unwrap();
        assert_eq!(it.steps(), 9);
        let batches: Vec<_> = it.map(|b| b.unwrap()).collect();
        assert_eq!(batches.len(), 9);
        for (l, u) in &batches {
            assert_eq!(l.len(), 2);
            assert_eq!(u.len(), 6);
        }
        let again = batch_iterator(&split.labeled, &split.unlabeled, 2, 3, 7, 0).unwrap();
        for (i, b) in again.enumerate() {
            assert_eq!(b.unwrap().1.samples(), batches[i].1.samples());
        }
        // the first permutation is visited in full
        let it = batch_iterator(&split.labeled, &split.unlabeled, 2, 3, 7, 0).unwrap();
        let mut seen: Vec<usize> = (0..9).flat_map(|s| it.unlabeled_indices(s).to_vec()).take(50).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..50).collect::<Vec<_>>());
    }

    #[test]
    fn single_labeled_sample_repeats() {
        let d = Dataset::new(Tensor::matrix(1, 2, vec![1.0, 2.0]), vec![1], 2).unwrap();
        let u = Tensor::zeros(&[10, 2]);
        let it = batch_iterator(&d, &u, 3, 2, 0, 0).unwrap();
        for step in 0..it.steps() {
            assert_eq!(it.labeled_indices(step), &[0, 0, 0]);
        }
        assert!(batch_iterator(&d, &u, 0, 2, 0, 0).is_err());
    }
}
