//! Logits and representation export for external projection tools.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{ModelParams, ModelSpec};
use crate::runner::eval::predict;

#[derive(Debug, Clone, PartialEq)]
pub struct LogitsRow {
    pub sample_index: usize,
    pub true_label: usize,
    pub predicted_label: usize,
    pub logits: Vec<f64>,
    pub representation: Vec<f64>,
}

pub fn logits_header(num_classes: usize, repr_width: usize) -> Vec<String> {
    let mut h: Vec<String> = ["sample_index", "true_label", "predicted_label"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    h.extend((0..num_classes).map(|k| format!("logit_{k}")));
    h.extend((0..repr_width).map(|k| format!("repr_{k}")));
    h
}

pub fn write_logits(w: impl Write, spec: &ModelSpec, params: &ModelParams, split: &Dataset) -> Result<usize> {
    if split.is_empty() {
        return Err(Error::InvalidArgument("cannot export an empty split".into()));
    }
    let (repr, logits) = predict(spec, params, split.samples())?;
    let mut out = csv::Writer::from_writer(w);
    out.write_record(logits_header(logits.cols(), repr.cols()))?;
    let predicted = logits.argmax_rows();
    for (i, (label, pred)) in split.labels().iter().zip(&predicted).enumerate() {
        let mut rec = vec![i.to_string(), label.to_string(), pred.to_string()];
        rec.extend(logits.row(i).iter().map(|v| v.to_string()));
        rec.extend(repr.row(i).iter().map(|v| v.to_string()));
        out.write_record(rec)?;
    }
    out.flush().map_err(csv::Error::from)?;
    Ok(split.len())
}

/// Writes one CSV row per sample; returns the number of rows.
pub fn export_logits(spec: &ModelSpec, params: &ModelParams, split: &Dataset, path: &Path) -> Result<usize> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_logits(BufWriter::new(file), spec, params, split)
}

pub fn read_logits(r: impl Read) -> Result<Vec<LogitsRow>> {
    let mut rdr = csv::Reader::from_reader(r);
    let header = rdr.headers()?.clone();
    let k = header.iter().filter(|h| h.starts_with("logit_")).count();
    let rw = header.iter().filter(|h| h.starts_with("repr_")).count();
    if header.iter().ne(logits_header(k, rw).iter().map(String::as_str)) {
        return Err(Error::Format {
            offset: 0,
            detail: "unexpected logits header".into(),
        });
    }
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let bad = || Error::Format {
            offset: i + 2,
            detail: "unparseable logits row".into(),
        };
        let nums: Vec<f64> = rec
            .iter()
            .skip(3)
            .map(|v| v.parse().map_err(|_| bad()))
            .collect::<Result<_>>()?;
        let int = |c: usize| rec[c].parse::<usize>().map_err(|_| bad());
        rows.push(LogitsRow {
            sample_index: int(0)?,
            true_label: int(1)?,
            predicted_label: int(2)?,
            logits: nums[..k].to_vec(),
            representation: nums[k..].to_vec(),
        });
    }
    Ok(rows)
}

pub fn load_logits(path: &Path) -> Result<Vec<LogitsRow>> {
    read_logits(File::open(path).map_err(|e| Error::io(path, e))?)
}
