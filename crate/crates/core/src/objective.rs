//! The training objective: supervised cross-entropy, pseudo-labeled
//! cross-entropy on strongly augmented samples, and ranking losses on the
//! L2-normalized logits of both branches, combined as
//! `L = L_s^CE + λu·L_u^CE + λr·(L_s^Rank + L_u^Rank)`.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::graph::{self, Gradients, Graph, NodeId};
use crate::model::{self, ModelParams, ModelSpec};
use crate::ranking::{self, RankingLossConfig, RankingTerm, RankingVariant, TripletCensus};
use crate::tensor::{argmax, Tensor};

/// Lower clamp on predicted probabilities inside cross-entropy.
pub const PROB_FLOOR: f64 = 1e-12;

/// Max-subtracted softmax of one row.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    graph::softmax_row(logits)
}

/// `−Σ v·ln q` with `q` clamped below at [`PROB_FLOOR`].
pub fn cross_entropy(target: &[f64], prediction: &[f64]) -> f64 {
    -target
        .iter()
        .zip(prediction)
        .filter(|(&t, _)| t != 0.0)
        .map(|(&t, &q)| t * q.max(PROB_FLOOR).ln())
        .sum::<f64>()
}

pub fn one_hot(labels: &[usize], num_classes: usize) -> Tensor {
    let mut data = vec![0.0; labels.len() * num_classes];
    for (i, &l) in labels.iter().enumerate() {
        data[i * num_classes + l] = 1.0;
    }
    Tensor::matrix(labels.len(), num_classes, data)
}

#[derive(Debug, Clone)]
pub struct LabeledBatch {
    samples: Tensor,
    one_hot: Tensor,
    labels: Vec<usize>,
}

impl LabeledBatch {
    pub fn new(samples: Tensor, labels: &[usize], num_classes: usize) -> Result<Self> {
        if samples.rows() != labels.len() || labels.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "{} samples vs {} labels",
                samples.rows(),
                labels.len()
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::InvalidArgument(format!("label {l} >= {num_classes}")));
        }
        Ok(LabeledBatch {
            samples,
            one_hot: one_hot(labels, num_classes),
            labels: labels.to_vec(),
        })
    }

    /// Accepts explicit one-hot rows, rejecting anything else.
    pub fn from_one_hot(samples: Tensor, one_hot: Tensor) -> Result<Self> {
        let k = one_hot.cols();
        let mut labels = Vec::with_capacity(one_hot.rows());
        for r in 0..one_hot.rows() {
            let row = one_hot.row(r);
            let ones = row.iter().filter(|&&v| v == 1.0).count();
            let zeros = row.iter().filter(|&&v| v == 0.0).count();
            if ones != 1 || zeros != k - 1 {
                return Err(Error::InvalidArgument(format!("row {r} is not one-hot")));
            }
            labels.push(argmax(row));
        }
        Self::new(samples, &labels, k)
    }

    pub fn samples(&self) -> &Tensor {
        &self.samples
    }

    pub fn one_hot(&self) -> &Tensor {
        &self.one_hot
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct UnlabeledBatch {
    samples: Tensor,
}

impl UnlabeledBatch {
    pub fn new(samples: Tensor) -> Result<Self> {
        if samples.rows() == 0 {
            return Err(Error::InvalidArgument("empty unlabeled batch".into()));
        }
        Ok(UnlabeledBatch { samples })
    }

    /// Also checks the `μ·B` row count.
    pub fn with_ratio(samples: Tensor, mu: usize, labeled_batch: usize) -> Result<Self> {
        if samples.rows() != mu * labeled_batch {
            return Err(Error::InvalidArgument(format!(
                "unlabeled batch has {} rows, expected μ·B = {}",
                samples.rows(),
                mu * labeled_batch
            )));
        }
        Self::new(samples)
    }

    pub fn samples(&self) -> &Tensor {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.rows() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabelOutcome {
    pub probabilities: Tensor,
    pub hard_labels: Vec<usize>,
    pub confidence_mask: Vec<bool>,
}

impl PseudoLabelOutcome {
    pub fn confident_fraction(&self) -> f64 {
        if self.confidence_mask.is_empty() {
            return 0.0;
        }
        self.confidence_mask.iter().filter(|&&m| m).count() as f64 / self.confidence_mask.len() as f64
    }
}

/// Softmax, argmax (lowest index on ties) and the inclusive `max ≥ τ` mask.
pub fn pseudo_label(weak_logits: &Tensor, tau: f64) -> Result<PseudoLabelOutcome> {
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(Error::InvalidArgument(format!("τ must be in (0, 1], got {tau}")));
    }
    let mut probs = Vec::with_capacity(weak_logits.len());
    let mut hard = Vec::with_capacity(weak_logits.rows());
    let mut mask = Vec::with_capacity(weak_logits.rows());
    for r in 0..weak_logits.rows() {
        let p = softmax(weak_logits.row(r));
        let k = argmax(&p);
        hard.push(k);
        mask.push(p[k] >= tau);
        probs.extend(p);
    }
    Ok(PseudoLabelOutcome {
        probabilities: Tensor::matrix(weak_logits.rows(), weak_logits.cols(), probs),
        hard_labels: hard,
        confidence_mask: mask,
    })
}

/// Source of the weak and strong views of a batch.
pub trait Augmenter {
    fn weak(&mut self, samples: &Tensor) -> Result<Tensor>;
    fn strong(&mut self, samples: &Tensor) -> Result<Tensor>;
}

/// Returns samples unchanged for both views.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoAugment;

impl Augmenter for NoAugment {
    fn weak(&mut self, samples: &Tensor) -> Result<Tensor> {
        Ok(samples.clone())
    }

    fn strong(&mut self, samples: &Tensor) -> Result<Tensor> {
        Ok(samples.clone())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveConfig {
    pub lambda_u: f64,
    pub lambda_r: f64,
    pub tau: f64,
    /// `None` disables both ranking terms.
    pub variant: Option<RankingVariant>,
    pub ranking: RankingLossConfig,
    /// L2-normalize logits before the ranking losses.
    pub normalize: bool,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig {
            lambda_u: 1.0,
            lambda_r: 1.0,
            tau: 0.95,
            variant: Some(RankingVariant::BatchMean),
            ranking: RankingLossConfig::default(),
            normalize: true,
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(Error::Config(format!("tau must be in (0, 1], got {}", self.tau)));
        }
        if !(self.lambda_u >= 0.0 && self.lambda_r >= 0.0) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        self.ranking.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub supervised_ce: f64,
    pub unsupervised_ce: f64,
    pub supervised_rank: f64,
    pub unsupervised_rank: f64,
    pub total: f64,
    pub confident_fraction: f64,
    pub census: TripletCensus,
    /// Largest pairwise distance fed to a triplet loss in this step.
    pub max_pairwise_distance: Option<f64>,
}

impl LossBreakdown {
    /// Recombines the four terms with the given weights.
    pub fn recombine(&self, lambda_u: f64, lambda_r: f64) -> f64 {
        self.supervised_ce
            + lambda_u * self.unsupervised_ce
            + lambda_r * (self.supervised_rank + self.unsupervised_rank)
    }

    pub fn is_finite(&self) -> bool {
        [
            self.supervised_ce,
            self.unsupervised_ce,
            self.supervised_rank,
            self.unsupervised_rank,
            self.total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// `(1/B)·Σ H(l_b, softmax(logits_b))` as a graph node.
pub fn build_supervised_ce(g: &mut Graph, logits: NodeId, targets: &Tensor) -> Result<NodeId> {
    let logp = g.log_softmax(logits);
    let t = g.constant(targets.clone());
    let prod = g.mul(logp, t)?;
    let s = g.sum(prod);
    Ok(g.scale(s, -1.0 / targets.rows() as f64))
}

/// `(1/μB)·Σ mask_b·H(q̂_b, softmax(strong_logits_b))` as a graph node.
pub fn build_unsupervised_ce(g: &mut Graph, strong_logits: NodeId, pseudo: &PseudoLabelOutcome) -> Result<NodeId> {
    let n = pseudo.hard_labels.len();
    let k = pseudo.probabilities.cols();
    let mut w = one_hot(&pseudo.hard_labels, k);
    for (r, &keep) in pseudo.confidence_mask.iter().enumerate() {
        if !keep {
            w.data_mut()[r * k..(r + 1) * k].fill(0.0);
        }
    }
    let logp = g.log_softmax(strong_logits);
    let t = g.constant(w);
    let prod = g.mul(logp, t)?;
    let s = g.sum(prod);
    Ok(g.scale(s, -1.0 / n as f64))
}

fn select_rows(g: &mut Graph, x: NodeId, rows: &[usize], total: usize) -> Result<NodeId> {
    let mut sel = vec![0.0; rows.len() * total];
    for (i, &r) in rows.iter().enumerate() {
        sel[i * total + r] = 1.0;
    }
    let s = g.constant(Tensor::matrix(rows.len(), total, sel));
    g.matmul(s, x)
}

/// A fully built objective for one step, ready for backward.
#[derive(Debug)]
pub struct ObjectiveStep {
    pub graph: Graph,
    pub total: NodeId,
    pub breakdown: LossBreakdown,
    pub pseudo: PseudoLabelOutcome,
    pub labeled_logits: NodeId,
    pub strong_logits: NodeId,
}

impl ObjectiveStep {
    /// Gradients of the total loss with respect to every parameter.
    pub fn gradients(&mut self) -> Result<Gradients> {
        self.graph.backward(self.total, &Tensor::scalar(1.0))
    }
}

/// Builds and evaluates the objective on one labeled and one unlabeled batch.
///
/// The labeled ranking loss uses weak-branch logits with ground-truth labels;
/// the unlabeled ranking loss uses strong-branch logits of every unlabeled row
/// with pseudo-labels taken from the weak branch (no confidence mask unless
/// `cfg.ranking.apply_confidence_mask`).
pub fn total_loss(
    labeled: &LabeledBatch,
    unlabeled: &UnlabeledBatch,
    spec: &ModelSpec,
    params: &ModelParams,
    aug: &mut dyn Augmenter,
    cfg: &ObjectiveConfig,
) -> Result<ObjectiveStep> {
    cfg.validate()?;
    let x_weak = aug.weak(labeled.samples())?;
    let u_weak = aug.weak(unlabeled.samples())?;
    let u_strong = aug.strong(unlabeled.samples())?;

    let (_, weak_logits) = model::model_forward(spec, params, &u_weak)?;
    let pseudo = pseudo_label(&weak_logits, cfg.tau)?;

    let mut g = Graph::new();
    let pnodes = model::declare_params(&mut g, spec)?;
    let xin = g.input("x_weak", x_weak.shape())?;
    let uin = g.input("u_strong", u_strong.shape())?;
    let fx = model::build_forward(&mut g, spec, &pnodes, xin)?;
    let fu = model::build_forward(&mut g, spec, &pnodes, uin)?;

    let ce_s = build_supervised_ce(&mut g, fx.logits, labeled.one_hot())?;
    let ce_u = build_unsupervised_ce(&mut g, fu.logits, &pseudo)?;

    let (rank_s, rank_u) = match cfg.variant {
        None => (None, None),
        Some(variant) => {
            let ex = if cfg.normalize { g.l2_normalize_rows(fx.logits) } else { fx.logits };
            let eu = if cfg.normalize { g.l2_normalize_rows(fu.logits) } else { fu.logits };
            let rs = ranking::build_ranking_loss(&mut g, variant, ex, labeled.labels(), &cfg.ranking)?;
            let ru = if cfg.ranking.apply_confidence_mask {
                let rows: Vec<usize> = (0..pseudo.hard_labels.len())
                    .filter(|&i| pseudo.confidence_mask[i])
                    .collect();
                if rows.is_empty() {
                    None
                } else {
                    let labels: Vec<usize> = rows.iter().map(|&i| pseudo.hard_labels[i]).collect();
                    let sel = select_rows(&mut g, eu, &rows, pseudo.hard_labels.len())?;
                    Some(ranking::build_ranking_loss(&mut g, variant, sel, &labels, &cfg.ranking)?)
                }
            } else {
                Some(ranking::build_ranking_loss(
                    &mut g,
                    variant,
                    eu,
                    &pseudo.hard_labels,
                    &cfg.ranking,
                )?)
            };
            (Some(rs), ru)
        }
    };
    let term_node = |g: &mut Graph, t: &Option<RankingTerm>| match t {
        Some(t) => t.loss,
        None => g.constant(Tensor::scalar(0.0)),
    };
    let rs_node = term_node(&mut g, &rank_s);
    let ru_node = term_node(&mut g, &rank_u);

    let weighted_u = g.scale(ce_u, cfg.lambda_u);
    let rank_sum = g.add(rs_node, ru_node)?;
    let weighted_r = g.scale(rank_sum, cfg.lambda_r);
    let partial = g.add(ce_s, weighted_u)?;
    let total = g.add(partial, weighted_r)?;

    let mut bind: HashMap<String, Tensor> = params.bindings();
    bind.insert("x_weak".into(), x_weak);
    bind.insert("u_strong".into(), u_strong);
    g.forward(&bind)?;

    let mut census = TripletCensus::default();
    let mut max_d: Option<f64> = None;
    for t in rank_s.iter().chain(rank_u.iter()) {
        census += t.census;
        if let Some(d) = t.distances {
            let m = g.value(d)?.data().iter().copied().fold(0.0, f64::max);
            max_d = Some(max_d.map_or(m, |x: f64| x.max(m)));
        }
    }
    let breakdown = LossBreakdown {
        supervised_ce: g.value(ce_s)?.item(),
        unsupervised_ce: g.value(ce_u)?.item(),
        supervised_rank: g.value(rs_node)?.item(),
        unsupervised_rank: g.value(ru_node)?.item(),
        total: g.value(total)?.item(),
        confident_fraction: pseudo.confident_fraction(),
        census,
        max_pairwise_distance: max_d,
    };
    Ok(ObjectiveStep {
        graph: g,
        total,
        breakdown,
        pseudo,
        labeled_logits: fx.logits,
        strong_logits: fu.logits,
    })
}

/// Value of the supervised cross-entropy term on the weak view.
pub fn supervised_ce_loss(
    batch: &LabeledBatch,
    spec: &ModelSpec,
    params: &ModelParams,
    aug: &mut dyn Augmenter,
) -> Result<f64> {
    let x = aug.weak(batch.samples())?;
    let (_, logits) = model::model_forward(spec, params, &x)?;
    let mut g = Graph::new();
    let l = g.input("logits", logits.shape())?;
    let ce = build_supervised_ce(&mut g, l, batch.one_hot())?;
    g.forward(&HashMap::from([("logits".to_string(), logits)]))?;
    Ok(g.value(ce)?.item())
}

/// Value of the pseudo-labeled cross-entropy term and the pseudo-labels used.
pub fn unsupervised_ce_loss(
    batch: &UnlabeledBatch,
    spec: &ModelSpec,
    params: &ModelParams,
    aug: &mut dyn Augmenter,
    tau: f64,
) -> Result<(f64, PseudoLabelOutcome)> {
    let uw = aug.weak(batch.samples())?;
    let us = aug.strong(batch.samples())?;
    let (_, weak_logits) = model::model_forward(spec, params, &uw)?;
    let pseudo = pseudo_label(&weak_logits, tau)?;
    let (_, strong_logits) = model::model_forward(spec, params, &us)?;
    let mut g = Graph::new();
    let l = g.input("logits", strong_logits.shape())?;
    let ce = build_unsupervised_ce(&mut g, l, &pseudo)?;
    g.forward(&HashMap::from([("logits".to_string(), strong_logits)]))?;
    Ok((g.value(ce)?.item(), pseudo))
}
