//! Per-step metrics CSV.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// First line of every metrics file.
pub const METRICS_VERSION_LINE: &str = "# rankmatch-metrics v1";
pub const METRICS_COLUMNS: [&str; 15] = [
    "step",
    "epoch",
    "lr",
    "supervised_ce",
    "unsupervised_ce",
    "supervised_rank",
    "unsupervised_rank",
    "total",
    "confident_fraction",
    "train_accuracy",
    "validation_accuracy",
    "test_accuracy",
    "raw_validation_accuracy",
    "max_pairwise_distance",
    "wall_time_ns",
];

/// One training step. Accuracies are filled on evaluation steps only.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricsRow {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub supervised_ce: f64,
    pub unsupervised_ce: f64,
    pub supervised_rank: f64,
    pub unsupervised_rank: f64,
    pub total: f64,
    pub confident_fraction: f64,
    pub train_accuracy: Option<f64>,
    pub validation_accuracy: Option<f64>,
    pub test_accuracy: Option<f64>,
    /// Validation accuracy of the raw (non-averaged) parameters.
    pub raw_validation_accuracy: Option<f64>,
    pub max_pairwise_distance: Option<f64>,
    pub wall_time_ns: u64,
}

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| x.to_string())
}

impl MetricsRow {
    fn fields(&self) -> [String; 15] {
        [
            self.step.to_string(),
            self.epoch.to_string(),
            self.lr.to_string(),
            self.supervised_ce.to_string(),
            self.unsupervised_ce.to_string(),
            self.supervised_rank.to_string(),
            self.unsupervised_rank.to_string(),
            self.total.to_string(),
            self.confident_fraction.to_string(),
            opt(self.train_accuracy),
            opt(self.validation_accuracy),
            opt(self.test_accuracy),
            opt(self.raw_validation_accuracy),
            opt(self.max_pairwise_distance),
            self.wall_time_ns.to_string(),
        ]
    }
}

/// The exact header block: version line then column names.
pub fn metrics_header() -> String {
    format!("{METRICS_VERSION_LINE}\n{}\n", METRICS_COLUMNS.join(","))
}

pub fn write_metrics(w: impl Write, rows: &[MetricsRow]) -> Result<()> {
    if rows.is_empty() {
        return Err(Error::InvalidArgument("no metrics rows to write".into()));
    }
    let mut w = w;
    w.write_all(metrics_header().as_bytes())
        .map_err(|e| Error::Csv(csv::Error::from(e)))?;
    let mut out = csv::WriterBuilder::new().has_headers(false).from_writer(w);
    for r in rows {
        out.write_record(r.fields())?;
    }
    out.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// Writes the whole file, replacing any previous content.
pub fn emit_metrics(rows: &[MetricsRow], path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_metrics(&mut buf, rows)?;
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn parse_metrics(text: &str) -> Result<Vec<MetricsRow>> {
    let header = metrics_header();
    let body = text.strip_prefix(header.as_str()).ok_or_else(|| Error::Format {
        offset: 0,
        detail: "metrics header does not match".into(),
    })?;
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_reader(body.as_bytes());
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let bad = |c: usize| Error::Format {
            offset: i + 3,
            detail: format!("bad `{}` value", METRICS_COLUMNS[c]),
        };
        if rec.len() != METRICS_COLUMNS.len() {
            return Err(Error::Format {
                offset: i + 3,
                detail: format!("{} fields, expected {}", rec.len(), METRICS_COLUMNS.len()),
            });
        }
        let f = |c: usize| -> Result<f64> { rec[c].parse().map_err(|_| bad(c)) };
        let o = |c: usize| -> Result<Option<f64>> {
            if rec[c].is_empty() {
                Ok(None)
            } else {
                rec[c].parse().map(Some).map_err(|_| bad(c))
            }
        };
        rows.push(MetricsRow {
            step: rec[0].parse().map_err(|_| bad(0))?,
            epoch: rec[1].parse().map_err(|_| bad(1))?,
            lr: f(2)?,
            supervised_ce: f(3)?,
            unsupervised_ce: f(4)?,
            supervised_rank: f(5)?,
            unsupervised_rank: f(6)?,
            total: f(7)?,
            confident_fraction: f(8)?,
            train_accuracy: o(9)?,
            validation_accuracy: o(10)?,
            test_accuracy: o(11)?,
            raw_validation_accuracy: o(12)?,
            max_pairwise_distance: o(13)?,
            wall_time_ns: rec[14].parse().map_err(|_| bad(14))?,
        });
    }
    Ok(rows)
}

pub fn load_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    parse_metrics(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(step: usize) -> MetricsRow {
        MetricsRow {
            step,
            lr: 0.03,
            total: 1.0 / 3.0,
            validation_accuracy: step.is_multiple_of(2).then_some(0.75),
            ..Default::default()
        }
    }

    #[test]
    fn header_is_fixed() {
        assert_eq!(
            metrics_header(),
            "# rankmatch-metrics v1\nstep,epoch,lr,supervised_ce,unsupervised_ce,supervised_rank,unsupervised_rank,total,\
             confident_fraction,train_accuracy,validation_accuracy,test_accuracy,raw_validation_accuracy,\
             max_pairwise_distance,wall_time_ns\n"
        );
    }

    #[test]
    fn round_trip_and_empty() {
        let rows: Vec<_> = (0..4).map(row).collect();
        let mut buf = Vec::new();
        write_metrics(&mut buf, &rows).unwrap();
        assert_eq!(parse_metrics(std::str::from_utf8(&buf).unwrap()).unwrap(), rows);
        assert!(write_metrics(Vec::new(), &[]).is_err());
        assert!(parse_metrics("step\n").is_err());
    }
}
