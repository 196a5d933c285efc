//! Ranking losses over L2-normalized logits.
//!
//! Four losses are provided, each as a graph builder (for training) and as a
//! value-level function over a [`NormalizedLogitsBatch`]:
//!
//! - BatchAll: mean of `f(m + d(a,p) − d(a,n))` over every valid triplet.
//! - BatchHard: per anchor, the furthest positive against the nearest negative.
//! - BatchMean: per anchor, summed positive and negative distances, each scaled
//!   by `1/|C|` (or by the positive/negative counts in
//!   [`PositiveNormalization::PositiveCount`] mode).
//! - Contrastive: temperature-scaled cross-entropy of each ordered positive pair
//!   against the anchor's negatives.
//!
//! `f` is softplus (soft margin) or the hinge `max(0, ·)`. Anchors without any
//! negative are skipped by BatchHard and BatchMean; BatchHard also skips anchors
//! without a positive. The outer `1/|C|` is kept regardless, and a batch with no
//! valid term has loss 0 and zero gradient. Ties in max/min go to the lowest row.

use std::collections::HashMap;
use std::fmt;
use std::ops::{Add, AddAssign};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::graph::{self, Graph, NodeId};
use crate::tensor::Tensor;

pub use crate::graph::softplus as soft_margin;

/// How BatchMean scales its inner positive and negative sums.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PositiveNormalization {
    /// Divide both sums by the batch size `|C|`.
    #[default]
    BatchSize,
    /// Divide by the number of positives and negatives of the anchor.
    PositiveCount,
}

impl FromStr for PositiveNormalization {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "batch-size" => Ok(Self::BatchSize),
            "positive-count" => Ok(Self::PositiveCount),
            other => Err(Error::Config(format!("unknown positive_normalization `{other}`"))),
        }
    }
}

impl fmt::Display for PositiveNormalization {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::BatchSize => "batch-size",
            Self::PositiveCount => "positive-count",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RankingVariant {
    BatchAll,
    BatchHard,
    BatchMean,
    Contrastive,
}

impl RankingVariant {
    pub const ALL: [RankingVariant; 4] = [
        RankingVariant::BatchAll,
        RankingVariant::BatchHard,
        RankingVariant::BatchMean,
        RankingVariant::Contrastive,
    ];

    pub fn code(self) -> &'static str {
        match self {
            Self::BatchAll => "BA",
            Self::BatchHard => "BH",
            Self::BatchMean => "BM",
            Self::Contrastive => "CT",
        }
    }
}

impl FromStr for RankingVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "BA" => Ok(Self::BatchAll),
            "BH" => Ok(Self::BatchHard),
            "BM" => Ok(Self::BatchMean),
            "CT" => Ok(Self::Contrastive),
            other => Err(Error::Config(format!("unknown ranking variant `{other}`"))),
        }
    }
}

impl fmt::Display for RankingVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankingLossConfig {
    pub margin: f64,
    pub temperature: f64,
    /// Softplus when true, hinge otherwise.
    pub soft_margin: bool,
    pub positive_normalization: PositiveNormalization,
    /// Restrict the unlabeled ranking loss to confident pseudo-labels.
    pub apply_confidence_mask: bool,
}

impl Default for RankingLossConfig {
    fn default() -> Self {
        RankingLossConfig {
            margin: 0.5,
            temperature: 0.2,
            soft_margin: true,
            positive_normalization: PositiveNormalization::BatchSize,
            apply_confidence_mask: false,
        }
    }
}

impl RankingLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin >= 0.0) {
            return Err(Error::Config(format!("margin must be >= 0, got {}", self.margin)));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config(format!(
                "temperature must be > 0, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// Counts of the terms each mining strategy evaluates on a batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct TripletCensus {
    /// `V`: triplets with `a ≠ p`, `y_a = y_p ≠ y_n`.
    pub batch_all_triplets: u64,
    /// Anchors with at least one positive and one negative.
    pub batch_hard_triplets: u64,
    /// Anchors with at least one negative.
    pub batch_mean_triplets: u64,
    /// Pairwise distance or similarity entries materialized.
    pub pairwise_terms: u64,
}

impl Add for TripletCensus {
    type Output = TripletCensus;

    fn add(self, o: TripletCensus) -> TripletCensus {
        TripletCensus {
            batch_all_triplets: self.batch_all_triplets + o.batch_all_triplets,
            batch_hard_triplets: self.batch_hard_triplets + o.batch_hard_triplets,
            batch_mean_triplets: self.batch_mean_triplets + o.batch_mean_triplets,
            pairwise_terms: self.pairwise_terms + o.pairwise_terms,
        }
    }
}

impl AddAssign for TripletCensus {
    fn add_assign(&mut self, o: TripletCensus) {
        *self = *self + o;
    }
}

fn class_sizes(labels: &[usize]) -> HashMap<usize, u64> {
    let mut sizes = HashMap::new();
    for &l in labels {
        *sizes.entry(l).or_insert(0) += 1;
    }
    sizes
}

/// Census of a whole batch from its labels alone.
pub fn count_triplets(labels: &[usize]) -> TripletCensus {
    let n = labels.len() as u64;
    let sizes = class_sizes(labels);
    let mut census = TripletCensus {
        pairwise_terms: n * n,
        ..Default::default()
    };
    for &l in labels {
        let positives = sizes[&l] - 1;
        let negatives = n - sizes[&l];
        census.batch_all_triplets += positives * negatives;
        if positives > 0 && negatives > 0 {
            census.batch_hard_triplets += 1;
        }
        if negatives > 0 {
            census.batch_mean_triplets += 1;
        }
    }
    census
}

/// Census restricted to a single anchor row.
pub fn anchor_census(labels: &[usize], anchor: usize) -> TripletCensus {
    let y = labels[anchor];
    let positives = labels.iter().enumerate().filter(|&(i, &l)| i != anchor && l == y).count() as u64;
    let negatives = labels.iter().filter(|&&l| l != y).count() as u64;
    TripletCensus {
        batch_all_triplets: positives * negatives,
        batch_hard_triplets: u64::from(positives > 0 && negatives > 0),
        batch_mean_triplets: u64::from(negatives > 0),
        pairwise_terms: labels.len() as u64,
    }
}

/// Scales each row to unit Euclidean norm.
pub fn l2_normalize_rows(logits: &Tensor) -> Result<Tensor> {
    let mut out = logits.clone();
    out.clear_grad();
    let c = logits.cols();
    for r in 0..logits.rows() {
        let row = &mut out.data_mut()[r * c..(r + 1) * c];
        let norm = graph::dot(row, row).sqrt();
        if norm.is_nan() || norm <= graph::ZERO_NORM {
            return Err(Error::ZeroNormRow { row: r });
        }
        row.iter_mut().for_each(|v| *v /= norm);
    }
    Ok(out)
}

/// Rows of logits with their (ground-truth or pseudo) labels.
#[derive(Debug, Clone)]
pub struct NormalizedLogitsBatch {
    logits: Tensor,
    labels: Vec<usize>,
    num_classes: usize,
    normalized: bool,
}

impl NormalizedLogitsBatch {
    /// L2-normalizes `raw` row by row.
    pub fn new(raw: &Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        Self::check(raw, &labels, num_classes)?;
        Ok(NormalizedLogitsBatch {
            logits: l2_normalize_rows(raw)?,
            labels,
            num_classes,
            normalized: true,
        })
    }

    /// Keeps the rows as given; used for the no-normalization ablation.
    pub fn unnormalized(raw: &Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        Self::check(raw, &labels, num_classes)?;
        let mut logits = raw.clone();
        logits.clear_grad();
        Ok(NormalizedLogitsBatch {
            logits,
            labels,
            num_classes,
            normalized: false,
        })
    }

    fn check(raw: &Tensor, labels: &[usize], num_classes: usize) -> Result<()> {
        if raw.shape().len() != 2 || raw.rows() != labels.len() {
            return Err(Error::InvalidArgument(format!(
                "logits {:?} vs {} labels",
                raw.shape(),
                labels.len()
            )));
        }
        if raw.rows() == 0 {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::InvalidArgument(format!("label {l} >= {num_classes} classes")));
        }
        Ok(())
    }

    pub fn logits(&self) -> &Tensor {
        &self.logits
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Symmetric matrix of Euclidean distances between rows.
pub fn pairwise_euclidean(batch: &NormalizedLogitsBatch) -> Tensor {
    let x = batch.logits();
    let n = x.rows();
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let d = x
                .row(i)
                .iter()
                .zip(x.row(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            out[i * n + j] = d;
            out[j * n + i] = d;
        }
    }
    Tensor::matrix(n, n, out)
}

/// Row inner products; the cosine similarity when rows are normalized.
pub fn pairwise_cosine(batch: &NormalizedLogitsBatch) -> Tensor {
    let x = batch.logits();
    let n = x.rows();
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in i..n {
            let s = graph::dot(x.row(i), x.row(j));
            out[i * n + j] = s;
            out[j * n + i] = s;
        }
    }
    Tensor::matrix(n, n, out)
}

/// Graph nodes produced by a ranking-loss builder.
#[derive(Debug, Clone, Copy)]
pub struct RankingTerm {
    /// Scalar loss node (shape `[1]`).
    pub loss: NodeId,
    pub census: TripletCensus,
    /// Pairwise distance matrix feeding triplet losses.
    pub distances: Option<NodeId>,
    /// Ordered positive pairs (contrastive only).
    pub pairs: usize,
}

fn zero(g: &mut Graph) -> NodeId {
    g.constant(Tensor::scalar(0.0))
}

fn margin_fn(g: &mut Graph, x: NodeId, cfg: &RankingLossConfig) -> NodeId {
    if cfg.soft_margin {
        g.softplus(x)
    } else {
        g.hinge(x)
    }
}

struct Masks {
    n: usize,
    positive: Vec<bool>,
    negative: Vec<bool>,
    positives: Vec<usize>,
    negatives: Vec<usize>,
}

fn masks(labels: &[usize]) -> Masks {
    let n = labels.len();
    let mut m = Masks {
        n,
        positive: vec![false; n * n],
        negative: vec![false; n * n],
        positives: vec![0; n],
        negatives: vec![0; n],
    };
    for a in 0..n {
        for j in 0..n {
            if labels[j] == labels[a] {
                if j != a {
                    m.positive[a * n + j] = true;
                    m.positives[a] += 1;
                }
            } else {
                m.negative[a * n + j] = true;
                m.negatives[a] += 1;
            }
        }
    }
    m
}

/// Sums the per-anchor terms of the listed anchors and applies `1/|C|`.
fn anchor_mean(g: &mut Graph, per_anchor: NodeId, valid: Vec<usize>, n: usize) -> Result<NodeId> {
    if valid.is_empty() {
        return Ok(zero(g));
    }
    let picked = g.gather(per_anchor, valid)?;
    let total = g.sum(picked);
    Ok(g.scale(total, 1.0 / n as f64))
}

pub fn build_batch_all(
    g: &mut Graph,
    emb: NodeId,
    labels: &[usize],
    cfg: &RankingLossConfig,
) -> Result<RankingTerm> {
    let census = count_triplets(labels);
    let n = labels.len();
    let d = g.pairwise_distance(emb);
    if census.batch_all_triplets == 0 {
        return Ok(RankingTerm {
            loss: zero(g),
            census,
            distances: Some(d),
            pairs: 0,
        });
    }
    let v = census.batch_all_triplets as usize;
    let mut ap = Vec::with_capacity(v);
    let mut an = Vec::with_capacity(v);
    for a in 0..n {
        for p in 0..n {
            if p == a || labels[p] != labels[a] {
                continue;
            }
            for (q, &lq) in labels.iter().enumerate() {
                if lq != labels[a] {
                    ap.push(a * n + p);
                    an.push(a * n + q);
                }
            }
        }
    }
    let dap = g.gather(d, ap)?;
    let dan = g.gather(d, an)?;
    let diff = g.sub(dap, dan)?;
    let arg = g.offset(diff, cfg.margin);
    let f = margin_fn(g, arg, cfg);
    let total = g.sum(f);
    let loss = g.scale(total, 1.0 / v as f64);
    Ok(RankingTerm {
        loss,
        census,
        distances: Some(d),
        pairs: 0,
    })
}

pub fn build_batch_hard(
    g: &mut Graph,
    emb: NodeId,
    labels: &[usize],
    cfg: &RankingLossConfig,
) -> Result<RankingTerm> {
    let census = count_triplets(labels);
    let m = masks(labels);
    let d = g.pairwise_distance(emb);
    let valid: Vec<usize> = (0..m.n)
        .filter(|&a| m.positives[a] > 0 && m.negatives[a] > 0)
        .collect();
    let furthest = g.masked_row_max(d, m.positive)?;
    let nearest = g.masked_row_min(d, m.negative)?;
    let diff = g.sub(furthest, nearest)?;
    let arg = g.offset(diff, cfg.margin);
    let f = margin_fn(g, arg, cfg);
    let loss = anchor_mean(g, f, valid, m.n)?;
    Ok(RankingTerm {
        loss,
        census,
        distances: Some(d),
        pairs: 0,
    })
}

pub fn build_batch_mean(
    g: &mut Graph,
    emb: NodeId,
    labels: &[usize],
    cfg: &RankingLossConfig,
) -> Result<RankingTerm> {
    let census = count_triplets(labels);
    let m = masks(labels);
    let n = m.n;
    let d = g.pairwise_distance(emb);
    let mut w = vec![0.0; n * n];
    for a in 0..n {
        let (wp, wn) = match cfg.positive_normalization {
            PositiveNormalization::BatchSize => (1.0 / n as f64, 1.0 / n as f64),
            PositiveNormalization::PositiveCount => (
                1.0 / m.positives[a].max(1) as f64,
                1.0 / m.negatives[a].max(1) as f64,
            ),
        };
        for j in 0..n {
            if m.positive[a * n + j] {
                w[a * n + j] = wp;
            } else if m.negative[a * n + j] {
                w[a * n + j] = -wn;
            }
        }
    }
    let valid: Vec<usize> = (0..n).filter(|&a| m.negatives[a] > 0).collect();
    // positive mean minus negative mean in one pass
    let diff = g.masked_row_sum(d, w)?;
    let arg = g.offset(diff, cfg.margin);
    let f = margin_fn(g, arg, cfg);
    let loss = anchor_mean(g, f, valid, n)?;
    Ok(RankingTerm {
        loss,
        census,
        distances: Some(d),
        pairs: 0,
    })
}

pub fn build_contrastive(
    g: &mut Graph,
    emb: NodeId,
    labels: &[usize],
    cfg: &RankingLossConfig,
) -> Result<RankingTerm> {
    let census = count_triplets(labels);
    let m = masks(labels);
    let n = m.n;
    let mut pairs = Vec::new();
    let mut anchors = Vec::new();
    for a in 0..n {
        for p in 0..n {
            if m.positive[a * n + p] {
                pairs.push(a * n + p);
                anchors.push(a);
            }
        }
    }
    if pairs.is_empty() {
        return Ok(RankingTerm {
            loss: zero(g),
            census,
            distances: None,
            pairs: 0,
        });
    }
    let sim = g.matmul_transposed(emb, emb)?;
    let logits = g.scale(sim, 1.0 / cfg.temperature);
    // Row max over off-diagonal entries, treated as a constant shift.
    let off_diag: Vec<bool> = (0..n * n).map(|k| k / n != k % n).collect();
    let row_max = g.masked_row_max(logits, off_diag)?;
    let shift = g.stop_gradient(row_max);
    let shifted = g.sub_column(logits, shift)?;
    let e = g.exp(shifted);
    let neg_w = m.negative.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    let neg_sum = g.masked_row_sum(e, neg_w)?;
    let s_ap = g.gather(shifted, pairs.clone())?;
    let e_ap = g.gather(e, pairs.clone())?;
    let neg_per_pair = g.gather(neg_sum, anchors)?;
    let denom = g.add(e_ap, neg_per_pair)?;
    let log_denom = g.log(denom);
    let per_pair = g.sub(log_denom, s_ap)?;
    let total = g.sum(per_pair);
    let loss = g.scale(total, 1.0 / pairs.len() as f64);
    Ok(RankingTerm {
        loss,
        census,
        distances: None,
        pairs: pairs.len(),
    })
}

pub fn build_ranking_loss(
    g: &mut Graph,
    variant: RankingVariant,
    emb: NodeId,
    labels: &[usize],
    cfg: &RankingLossConfig,
) -> Result<RankingTerm> {
    match variant {
        RankingVariant::BatchAll => build_batch_all(g, emb, labels, cfg),
        RankingVariant::BatchHard => build_batch_hard(g, emb, labels, cfg),
        RankingVariant::BatchMean => build_batch_mean(g, emb, labels, cfg),
        RankingVariant::Contrastive => build_contrastive(g, emb, labels, cfg),
    }
}

fn evaluate(
    variant: RankingVariant,
    batch: &NormalizedLogitsBatch,
    cfg: &RankingLossConfig,
) -> Result<(f64, RankingTerm)> {
    cfg.validate()?;
    let mut g = Graph::new();
    let emb = g.input("emb", batch.logits().shape())?;
    let term = build_ranking_loss(&mut g, variant, emb, batch.labels(), cfg)?;
    let mut bind = HashMap::new();
    bind.insert("emb".to_string(), batch.logits().clone());
    g.forward(&bind)?;
    Ok((g.value(term.loss)?.item(), term))
}

pub fn batch_all_triplet_loss(
    batch: &NormalizedLogitsBatch,
    cfg: &RankingLossConfig,
) -> Result<(f64, TripletCensus)> {
    evaluate(RankingVariant::BatchAll, batch, cfg).map(|(l, t)| (l, t.census))
}

pub fn batch_hard_triplet_loss(
    batch: &NormalizedLogitsBatch,
    cfg: &RankingLossConfig,
) -> Result<(f64, TripletCensus)> {
    evaluate(RankingVariant::BatchHard, batch, cfg).map(|(l, t)| (l, t.census))
}

pub fn batch_mean_triplet_loss(
    batch: &NormalizedLogitsBatch,
    cfg: &RankingLossConfig,
) -> Result<(f64, TripletCensus)> {
    evaluate(RankingVariant::BatchMean, batch, cfg).map(|(l, t)| (l, t.census))
}

/// Returns the loss and the number of ordered positive pairs.
pub fn contrastive_loss(batch: &NormalizedLogitsBatch, cfg: &RankingLossConfig) -> Result<(f64, usize)> {
    evaluate(RankingVariant::Contrastive, batch, cfg).map(|(l, t)| (l, t.pairs))
}

pub fn ranking_loss(
    variant: RankingVariant,
    batch: &NormalizedLogitsBatch,
    cfg: &RankingLossConfig,
) -> Result<f64> {
    evaluate(variant, batch, cfg).map(|(l, _)| l)
}

/// Loss and gradient with respect to raw logits, normalizing inside the graph
/// when `normalize` is set.
pub fn ranking_loss_and_grad(
    variant: RankingVariant,
    logits: &Tensor,
    labels: &[usize],
    cfg: &RankingLossConfig,
    normalize: bool,
) -> Result<(f64, Tensor)> {
    let mut g = Graph::new();
    let x = g.input("logits", logits.shape())?;
    let emb = if normalize { g.l2_normalize_rows(x) } else { x };
    let term = build_ranking_loss(&mut g, variant, emb, labels, cfg)?;
    let mut bind = HashMap::new();
    bind.insert("logits".to_string(), logits.clone());
    g.forward(&bind)?;
    let loss = g.value(term.loss)?.item();
    let grads = g.backward(term.loss, &Tensor::scalar(1.0))?;
    Ok((loss, grads.get("logits").cloned().expect("input exists")))
}
