//! Accuracy, error rate and confusion matrix.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{self, ModelParams, ModelSpec};
use crate::tensor::Tensor;

/// Rows per forward pass during evaluation.
pub const EVAL_CHUNK: usize = 512;

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub error_rate: f64,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

impl Evaluation {
    pub fn from_predictions(predicted: &[usize], labels: &[usize], num_classes: usize) -> Result<Self> {
        if predicted.len() != labels.len() || labels.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "{} predictions for {} labels",
                predicted.len(),
                labels.len()
            )));
        }
        let mut confusion = vec![vec![0; num_classes]; num_classes];
        for (&p, &t) in predicted.iter().zip(labels) {
            if p >= num_classes || t >= num_classes {
                return Err(Error::InvalidArgument(format!("class index out of range: {t} -> {p}")));
            }
            confusion[t][p] += 1;
        }
        let correct: usize = (0..num_classes).map(|k| confusion[k][k]).sum();
        let accuracy = correct as f64 / labels.len() as f64;
        Ok(Evaluation {
            accuracy,
            error_rate: 1.0 - accuracy,
            confusion,
        })
    }
}

/// Representations and logits for every row, computed in chunks.
pub fn predict(spec: &ModelSpec, params: &ModelParams, samples: &Tensor) -> Result<(Tensor, Tensor)> {
    let n = samples.rows();
    let (mut reprs, mut logits) = (Vec::new(), Vec::new());
    let (mut rw, mut lw) = (0, 0);
    for start in (0..n).step_by(EVAL_CHUNK) {
        let idx: Vec<usize> = (start..(start + EVAL_CHUNK).min(n)).collect();
        let (r, l) = model::model_forward(spec, params, &samples.select_rows(&idx))?;
        rw = r.cols();
        lw = l.cols();
        reprs.extend(r.into_data());
        logits.extend(l.into_data());
    }
    Ok((Tensor::matrix(n, rw, reprs), Tensor::matrix(n, lw, logits)))
}

/// Argmax classification of a split.
pub fn evaluate(spec: &ModelSpec, params: &ModelParams, split: &Dataset) -> Result<Evaluation> {
    if split.is_empty() {
        return Err(Error::InvalidArgument("cannot evaluate an empty split".into()));
    }
    let (_, logits) = predict(spec, params, split.samples())?;
    Evaluation::from_predictions(&logits.argmax_rows(), split.labels(), split.num_classes())
}
