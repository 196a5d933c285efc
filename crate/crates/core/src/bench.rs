//! Cost profiling of the ranking losses: triplet counts, median wall time of
//! forward plus backward, and confidence growth over training.
//!
//! Timings are medians over repeated runs after discarded warmup runs. A
//! baseline (input, L2 normalization and a plain sum, forward plus backward)
//! is measured the same way and subtracted, saturating at zero.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::time::Instant;

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::{self, ModelParams, ModelSpec};
use crate::objective;
use crate::ranking::{self, RankingLossConfig, RankingVariant, TripletCensus};
use crate::tensor::Tensor;

pub const MIN_REPETITIONS: usize = 5;
const WARMUP: usize = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRecord {
    pub variant: RankingVariant,
    pub batch_size: usize,
    pub class_count: usize,
    pub confident_fraction: f64,
    pub census: TripletCensus,
    pub wall_time_ns: u64,
    pub repetitions: usize,
}

impl BenchRecord {
    /// Triplets materialized by this record's variant.
    pub fn triplets(&self) -> u64 {
        match self.variant {
            RankingVariant::BatchAll => self.census.batch_all_triplets,
            RankingVariant::BatchHard => self.census.batch_hard_triplets,
            RankingVariant::BatchMean => self.census.batch_mean_triplets,
            RankingVariant::Contrastive => 0,
        }
    }
}

pub fn median(values: &mut [u64]) -> u64 {
    values.sort_unstable();
    let n = values.len();
    if n == 0 {
        0
    } else if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2
    }
}

fn time_runs(repetitions: usize, mut run: impl FnMut() -> Result<()>) -> Result<u64> {
    for _ in 0..WARMUP {
        run()?;
    }
    let mut times = Vec::with_capacity(repetitions);
    for _ in 0..repetitions {
        let t = Instant::now();
        run()?;
        times.push(t.elapsed().as_nanos() as u64);
    }
    Ok(median(&mut times))
}

fn forward_backward(logits: &Tensor, loss: impl FnOnce(&mut Graph, crate::NodeId) -> Result<crate::NodeId>) -> Result<()> {
    let mut g = Graph::new();
    let x = g.input("logits", logits.shape())?;
    let e = g.l2_normalize_rows(x);
    let l = loss(&mut g, e)?;
    g.forward(&HashMap::from([("logits".to_string(), logits.clone())]))?;
    g.backward(l, &Tensor::scalar(1.0))?;
    Ok(())
}

/// Median time of building, evaluating and differentiating one ranking loss
/// on the given logits, with the baseline subtracted.
pub fn time_loss_variant(
    variant: RankingVariant,
    logits: &Tensor,
    labels: &[usize],
    cfg: &RankingLossConfig,
    repetitions: usize,
) -> Result<BenchRecord> {
    if repetitions < MIN_REPETITIONS {
        return Err(Error::InvalidArgument(format!(
            "at least {MIN_REPETITIONS} repetitions required, got {repetitions}"
        )));
    }
    if logits.rows() != labels.len() {
        return Err(Error::InvalidArgument("logits and labels differ in length".into()));
    }
    let baseline = time_runs(repetitions, || forward_backward(logits, |g, e| Ok(g.sum(e))))?;
    let total = time_runs(repetitions, || {
        forward_backward(logits, |g, e| {
            Ok(ranking::build_ranking_loss(g, variant, e, labels, cfg)?.loss)
        })
    })?;
    let class_count = labels.iter().max().map_or(0, |&m| m + 1);
    Ok(BenchRecord {
        variant,
        batch_size: labels.len(),
        class_count,
        confident_fraction: 1.0,
        census: ranking::count_triplets(labels),
        wall_time_ns: total.saturating_sub(baseline),
        repetitions,
    })
}

/// Labels `i mod k` for `i < n`.
pub fn balanced_labels(n: usize, k: usize) -> Vec<usize> {
    (0..n).map(|i| i % k.max(1)).collect()
}

/// `n·(n/k − 1)·(n − n/k)` for a batch of `n` with `k` equal classes.
pub fn balanced_batch_all_count(n: u64, k: u64) -> u64 {
    let per = n / k;
    n * per.saturating_sub(1) * (n - per)
}

/// Census for each batch size using the given label generator.
pub fn census_scaling(sizes: &[usize], labels: impl Fn(usize) -> Vec<usize>) -> Result<Vec<(usize, TripletCensus)>> {
    if sizes.is_empty() {
        return Err(Error::InvalidArgument("no batch sizes".into()));
    }
    Ok(sizes.iter().map(|&n| (n, ranking::count_triplets(&labels(n)))).collect())
}

/// Fraction of samples whose weak-view softmax max reaches `τ`, per batch.
pub fn confidence_sweep<'a>(
    spec: &ModelSpec,
    params: &ModelParams,
    batches: impl IntoIterator<Item = &'a Tensor>,
    tau: f64,
) -> Result<Vec<f64>> {
    batches
        .into_iter()
        .map(|b| {
            let (_, logits) = model::model_forward(spec, params, b)?;
            Ok(objective::pseudo_label(&logits, tau)?.confident_fraction())
        })
        .collect()
}

pub const BENCH_HEADER: [&str; 8] = [
    "variant",
    "batch_size",
    "class_count",
    "confident_fraction",
    "triplets",
    "pairwise_terms",
    "wall_time_ns_median",
    "repetitions",
];

pub fn write_bench_csv(w: impl Write, records: &[BenchRecord]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(BENCH_HEADER)?;
    for r in records {
        out.write_record([
            r.variant.code().to_string(),
            r.batch_size.to_string(),
            r.class_count.to_string(),
            r.confident_fraction.to_string(),
            r.triplets().to_string(),
            r.census.pairwise_terms.to_string(),
            r.wall_time_ns.to_string(),
            r.repetitions.to_string(),
        ])?;
    }
    out.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// One parsed bench CSV row; the census is reduced to the stored columns.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub variant: RankingVariant,
    pub batch_size: usize,
    pub class_count: usize,
    pub confident_fraction: f64,
    pub triplets: u64,
    pub pairwise_terms: u64,
    pub wall_time_ns: u64,
    pub repetitions: usize,
}

pub fn read_bench_csv(r: impl Read) -> Result<Vec<BenchRow>> {
    let mut rdr = csv::Reader::from_reader(r);
    let header = rdr.headers()?.clone();
    if header.iter().ne(BENCH_HEADER) {
        return Err(Error::Format {
            offset: 0,
            detail: format!("unexpected bench header {:?}", header),
        });
    }
    let bad = |line: usize, what: &str| Error::Format {
        offset: line,
        detail: format!("bad {what}"),
    };
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let f = |c: usize| rec.get(c).unwrap_or("");
        rows.push(BenchRow {
            variant: f(0).parse()?,
            batch_size: f(1).parse().map_err(|_| bad(i + 1, "batch_size"))?,
            class_count: f(2).parse().map_err(|_| bad(i + 1, "class_count"))?,
            confident_fraction: f(3).parse().map_err(|_| bad(i + 1, "confident_fraction"))?,
            triplets: f(4).parse().map_err(|_| bad(i + 1, "triplets"))?,
            pairwise_terms: f(5).parse().map_err(|_| bad(i + 1, "pairwise_terms"))?,
            wall_time_ns: f(6).parse().map_err(|_| bad(i + 1, "wall_time_ns_median"))?,
            repetitions: f(7).parse().map_err(|_| bad(i + 1, "repetitions"))?,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;

    #[test]
    fn closed_form_matches_enumeration() {
        for n in [8u64, 16, 32, 64] {
            for k in [2u64, 4, 8] {
                let c = ranking::count_triplets(&balanced_labels(n as usize, k as usize));
                assert_eq!(c.batch_all_triplets, balanced_batch_all_count(n, k));
                // singleton classes have no positives, so no hardest triplet
                assert_eq!(c.batch_hard_triplets, if n / k >= 2 { n } else { 0 });
                assert_eq!(c.batch_mean_triplets, n);
                assert_eq!(c.pairwise_terms, n * n);
            }
        }
        let single = census_scaling(&[4, 9, 16], |n| vec![0; n]).unwrap();
        assert!(single.iter().all(|(_, c)| c.batch_all_triplets == 0));
        assert!(census_scaling(&[], |n| vec![0; n]).is_err());
    }

    #[test]
    fn single_sample_batch_has_empty_census() {
        let logits = Tensor::matrix(1, 3, vec![0.2, 0.5, -0.1]);
        for v in RankingVariant::ALL {
            let r = time_loss_variant(v, &logits, &[0], &RankingLossConfig::default(), 5).unwrap();
            assert_eq!(r.triplets(), 0);
            assert_eq!(r.census.batch_all_triplets + r.census.batch_hard_triplets + r.census.batch_mean_triplets, 0);
        }
        assert!(time_loss_variant(RankingVariant::BatchAll, &logits, &[0], &RankingLossConfig::default(), 4).is_err());
    }

    #[test]
    fn confidence_fraction_bounds() {
        let spec = ModelSpec::mlp(4, &[8], 10);
        let params = init_params(&spec, 0).unwrap();
        let xs = Tensor::matrix(6, 4, (0..24).map(|i| (i as f64 * 0.37).sin() * 0.1).collect());
        let f = confidence_sweep(&spec, &params, [&xs, &xs], 0.95).unwrap();
        assert!(f.iter().all(|&v| v < 0.2));

        let confident = Tensor::matrix(2, 3, vec![50.0, 0.0, 0.0, 0.0, 0.0, 50.0]);
        assert_eq!(objective::pseudo_label(&confident, 0.95).unwrap().confident_fraction(), 1.0);
    }

    #[test]
    fn bench_csv_round_trip() {
        let labels = balanced_labels(8, 2);
        let logits = Tensor::matrix(8, 2, (0..16).map(|i| i as f64 * 0.1).collect());
        let rec = time_loss_variant(RankingVariant::BatchAll, &logits, &labels, &RankingLossConfig::default(), 5).unwrap();
        let mut buf = Vec::new();
        write_bench_csv(&mut buf, std::slice::from_ref(&rec)).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("variant,batch_size,class_count,confident_fraction,triplets,pairwise_terms,wall_time_ns_median,repetitions\n"));
        let rows = read_bench_csv(buf.as_slice()).unwrap();
        assert_eq!(rows[0].triplets, 96);
        assert_eq!(rows[0].wall_time_ns, rec.wall_time_ns);
        assert_eq!(rows[0].variant, RankingVariant::BatchAll);
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(&mut [5, 1, 3]), 3);
        assert_eq!(median(&mut [4, 1, 3, 2]), 2);
    }
}
