//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line;
//! the process exits non-zero if any criterion fails.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::collections::HashMap;
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rankmatch::bench::{self, balanced_labels};
use rankmatch::data::{self, Cifar10Record};
use rankmatch::gradcheck::finite_difference_check;
use rankmatch::model::{self, ModelSpec};
use rankmatch::objective::{self, LabeledBatch, NoAugment, ObjectiveConfig, UnlabeledBatch};
use rankmatch::optim::{self, EmaState};
use rankmatch::ranking::{self, NormalizedLogitsBatch, PositiveNormalization, RankingLossConfig, RankingVariant};
use rankmatch::runner::{self, metrics, ExperimentConfig, LogitsRow, MetricsRow, Trainer};
use rankmatch::{Error, Graph, Tensor};

type Outcome = std::result::Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn rel_err(a: f64, b: f64) -> f64 {
    // exact zeros of the true loss only survive up to rounding
    if a == b || (a - b).abs() <= 1e-15 {
        return 0.0;
    }
    (a - b).abs() / a.abs().max(b.abs())
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller
    let u1: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| gaussian(rng)).collect())
}

// ---------------------------------------------------------------------------
// Naive references

fn naive_normalize(x: &Tensor) -> Vec<Vec<f64>> {
    (0..x.rows())
        .map(|r| {
            let row = x.row(r);
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            row.iter().map(|v| v / norm).collect()
        })
        .collect()
}

fn naive_dist(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += (a[i] - b[i]) * (a[i] - b[i]);
    }
    s.sqrt()
}

fn naive_f(x: f64, soft: bool) -> f64 {
    if soft {
        (1.0 + x.exp()).ln()
    } else if x > 0.0 {
        x
    } else {
        0.0
    }
}

fn naive_batch_all(e: &[Vec<f64>], y: &[usize], cfg: &RankingLossConfig) -> f64 {
    let n = y.len();
    let mut total = 0.0;
    let mut count = 0usize;
    for a in 0..n {
        for p in 0..n {
            for q in 0..n {
                if a != p && y[a] == y[p] && y[q] != y[a] {
                    total += naive_f(cfg.margin + naive_dist(&e[a], &e[p]) - naive_dist(&e[a], &e[q]), cfg.soft_margin);
                    count += 1;
                }
            }
        }
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

fn naive_batch_hard(e: &[Vec<f64>], y: &[usize], cfg: &RankingLossConfig) -> f64 {
    let n = y.len();
    let mut total = 0.0;
    for a in 0..n {
        let mut hardest_pos: Option<f64> = None;
        let mut hardest_neg: Option<f64> = None;
        for j in 0..n {
            let d = naive_dist(&e[a], &e[j]);
            if j != a && y[j] == y[a] {
                hardest_pos = Some(hardest_pos.map_or(d, |h| h.max(d)));
            } else if y[j] != y[a] {
                hardest_neg = Some(hardest_neg.map_or(d, |h| h.min(d)));
            }
        }
        if let (Some(p), Some(q)) = (hardest_pos, hardest_neg) {
            total += naive_f(cfg.margin + p - q, cfg.soft_margin);
        }
    }
    total / n as f64
}

fn naive_batch_mean(e: &[Vec<f64>], y: &[usize], cfg: &RankingLossConfig) -> f64 {
    let n = y.len();
    let mut total = 0.0;
    for a in 0..n {
        let (mut sp, mut sn, mut np, mut nn) = (0.0, 0.0, 0usize, 0usize);
        for j in 0..n {
            let d = naive_dist(&e[a], &e[j]);
            if j != a && y[j] == y[a] {
                sp += d;
                np += 1;
            } else if y[j] != y[a] {
                sn += d;
                nn += 1;
            }
        }
        if nn == 0 {
            continue;
        }
        let (mp, mn) = match cfg.positive_normalization {
            PositiveNormalization::BatchSize => (sp / n as f64, sn / n as f64),
            PositiveNormalization::PositiveCount => (sp / np.max(1) as f64, sn / nn as f64),
        };
        total += naive_f(cfg.margin + mp - mn, cfg.soft_margin);
    }
    total / n as f64
}

fn naive_contrastive(e: &[Vec<f64>], y: &[usize], cfg: &RankingLossConfig) -> f64 {
    let n = y.len();
    let sim = |i: usize, j: usize| e[i].iter().zip(&e[j]).map(|(a, b)| a * b).sum::<f64>() / cfg.temperature;
    let mut total = 0.0;
    let mut pairs = 0usize;
    for a in 0..n {
        for p in 0..n {
            if p == a || y[p] != y[a] {
                continue;
            }
            let num = sim(a, p).exp();
            let mut den = num;
            for q in 0..n {
                if y[q] != y[a] {
                    den += sim(a, q).exp();
                }
            }
            total -= (num / den).ln();
            pairs += 1;
        }
    }
    if pairs == 0 {
        0.0
    } else {
        total / pairs as f64
    }
}

fn naive_reference(v: RankingVariant, e: &[Vec<f64>], y: &[usize], cfg: &RankingLossConfig) -> f64 {
    match v {
        RankingVariant::BatchAll => naive_batch_all(e, y, cfg),
        RankingVariant::BatchHard => naive_batch_hard(e, y, cfg),
        RankingVariant::BatchMean => naive_batch_mean(e, y, cfg),
        RankingVariant::Contrastive => naive_contrastive(e, y, cfg),
    }
}

// ---------------------------------------------------------------------------
// Criteria

fn loss_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    for i in 0..200 {
        let n = rng.random_range(2..=16);
        let k = rng.random_range(2..=4);
        let x = random_matrix(&mut rng, n, k);
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let cfg = RankingLossConfig {
            soft_margin: i % 2 == 0,
            positive_normalization: if i % 3 == 0 {
                PositiveNormalization::PositiveCount
            } else {
                PositiveNormalization::BatchSize
            },
            margin: [0.5, 0.2, 1.0][i % 3],
            ..RankingLossConfig::default()
        };
        let batch = NormalizedLogitsBatch::new(&x, labels.clone(), k).map_err(|e| e.to_string())?;
        let e = naive_normalize(&x);
        for v in RankingVariant::ALL {
            let got = ranking::ranking_loss(v, &batch, &cfg).map_err(|e| e.to_string())?;
            let want = naive_reference(v, &e, &labels, &cfg);
            let err = rel_err(got, want);
            ensure!(err <= 1e-9, "batch {i} {v}: {got} vs reference {want} (rel {err:e})");
            worst = worst.max(err);
        }
    }
    Ok(format!("200 batches x 4 losses, worst relative error {worst:.2e}"))
}

fn graph_grad(g: &mut Graph, out: rankmatch::NodeId, name: &str, bind: HashMap<String, Tensor>) -> rankmatch::Result<(f64, Vec<f64>)> {
    g.forward(&bind)?;
    let v = g.value(out)?.item();
    let grads = g.backward(out, &Tensor::scalar(1.0))?;
    Ok((v, grads.get(name).expect("bound input").data().to_vec()))
}

fn gradient_checks() -> Outcome {
    const TOL: f64 = 1e-4;
    const STEP: f64 = 1e-6;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut report = Vec::new();

    let labels = vec![0, 1, 2, 0, 1, 2, 0, 1];
    let x = random_matrix(&mut rng, labels.len(), 3);
    let cfg = RankingLossConfig::default();
    for v in RankingVariant::ALL {
        let err = finite_difference_check(
            |p| ranking::ranking_loss_and_grad(v, p, &labels, &cfg, true).map(|(l, g)| (l, g.into_data())),
            &x,
            STEP,
        )
        .map_err(|e| e.to_string())?;
        ensure!(err < TOL, "{v}: relative error {err:e}");
        report.push(format!("{v} {err:.1e}"));
    }

    let targets = objective::one_hot(&labels, 3);
    let err = finite_difference_check(
        |p| {
            let mut g = Graph::new();
            let l = g.input("logits", p.shape())?;
            let ce = objective::build_supervised_ce(&mut g, l, &targets)?;
            graph_grad(&mut g, ce, "logits", HashMap::from([("logits".to_string(), p.clone())]))
        },
        &x,
        STEP,
    )
    .map_err(|e| e.to_string())?;
    ensure!(err < TOL, "softmax+CE: relative error {err:e}");
    report.push(format!("CE {err:.1e}"));

    let weights = random_matrix(&mut rng, labels.len(), 3);
    let err = finite_difference_check(
        |p| {
            let mut g = Graph::new();
            let l = g.input("x", p.shape())?;
            let n = g.l2_normalize_rows(l);
            let w = g.constant(weights.clone());
            let m = g.mul(n, w)?;
            let s = g.sum(m);
            graph_grad(&mut g, s, "x", HashMap::from([("x".to_string(), p.clone())]))
        },
        &x,
        STEP,
    )
    .map_err(|e| e.to_string())?;
    ensure!(err < TOL, "L2 normalization: relative error {err:e}");
    report.push(format!("L2 {err:.1e}"));

    // Full objective on a small MLP, checked against every parameter tensor.
    let spec = ModelSpec::mlp(4, &[12], 3);
    let params = model::init_params(&spec, 3).map_err(|e| e.to_string())?;
    ensure!(params.num_params() <= 200, "MLP has {} parameters", params.num_params());
    let xs = random_matrix(&mut rng, 6, 4);
    let us = random_matrix(&mut rng, 12, 4);
    let labeled = LabeledBatch::new(xs, &[0, 1, 2, 0, 1, 2], 3).map_err(|e| e.to_string())?;
    let unlabeled = UnlabeledBatch::new(us).map_err(|e| e.to_string())?;
    let ocfg = ObjectiveConfig {
        tau: 0.01,
        ..ObjectiveConfig::default()
    };
    let mut worst: f64 = 0.0;
    for name in params.names() {
        let point = params.get(&name).unwrap().clone();
        let err = finite_difference_check(
            |p| {
                let mut trial = params.clone();
                *trial.get_mut(&name).unwrap() = p.clone();
                let mut step = objective::total_loss(&labeled, &unlabeled, &spec, &trial, &mut NoAugment, &ocfg)?;
                let grads = step.gradients()?;
                Ok((step.breakdown.total, grads.get(&name).unwrap().data().to_vec()))
            },
            &point,
            STEP,
        )
        .map_err(|e| e.to_string())?;
        ensure!(err < TOL, "MLP parameter {name}: relative error {err:e}");
        worst = worst.max(err);
    }
    report.push(format!("MLP({} params) {worst:.1e}", params.num_params()));
    Ok(report.join(", "))
}

fn census() -> Outcome {
    let scenario = [0, 0, 0, 0, 1, 1];
    let c = ranking::anchor_census(&scenario, 0);
    ensure!(
        (c.batch_all_triplets, c.batch_hard_triplets, c.batch_mean_triplets) == (6, 1, 1),
        "single-anchor census {c:?}"
    );
    let mut checked = 0;
    for n in [8usize, 16, 32, 64] {
        for k in [2usize, 4, 8] {
            let labels = balanced_labels(n, k);
            let mut brute = 0u64;
            for a in 0..n {
                for p in 0..n {
                    for q in 0..n {
                        if a != p && labels[a] == labels[p] && labels[q] != labels[a] {
                            brute += 1;
                        }
                    }
                }
            }
            let closed = (n * (n / k - 1) * (n - n / k)) as u64;
            let counted = ranking::count_triplets(&labels).batch_all_triplets;
            ensure!(
                brute == closed && counted == closed,
                "n={n} k={k}: closed {closed}, enumerated {brute}, census {counted}"
            );
            checked += 1;
        }
    }
    Ok(format!("BA=6 BH=1 BM=1; {checked} balanced batches exact"))
}

fn compute_cost() -> Outcome {
    let cfg = RankingLossConfig::default();
    let reps = 31;
    let time = |v: RankingVariant, n: usize| -> std::result::Result<u64, String> {
        let (logits, labels) = runner::bench_batch(n, 10, 0);
        bench::time_loss_variant(v, &logits, &labels, &cfg, reps)
            .map(|r| r.wall_time_ns)
            .map_err(|e| e.to_string())
    };
    let ba = time(RankingVariant::BatchAll, 64)?;
    let bh = time(RankingVariant::BatchHard, 64)?;
    let bm = time(RankingVariant::BatchMean, 64)?;
    let spread = (bh as f64 - bm as f64).abs() / bm as f64;

    let sizes = [8usize, 16, 24, 32, 40, 48, 56, 64];
    let mut series = Vec::new();
    for &n in &sizes {
        let triplets = ranking::count_triplets(&balanced_labels(n, 10)).batch_all_triplets;
        series.push((triplets, time(RankingVariant::BatchAll, n)?));
    }
    series.sort_by_key(|&(t, _)| t);
    let mut inversions = 0;
    for i in 0..series.len() {
        for j in i + 1..series.len() {
            if series[i].0 < series[j].0 && series[i].1 > series[j].1 {
                inversions += 1;
            }
        }
    }
    let summary = format!(
        "n=64: BA {ba}ns, BH {bh}ns, BM {bm}ns, |BH-BM|/BM {:.1}%; BA inversions {inversions}",
        spread * 100.0
    );
    ensure!(ba > bm, "BA not slower than BM ({summary})");
    ensure!(spread <= 0.25, "BH and BM differ by more than 25% ({summary})");
    ensure!(inversions <= 2, "BA time not monotone in triplet count ({summary})");
    Ok(summary)
}

fn parse_config(text: &str, out: &Path) -> rankmatch::Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::parse(text)?;
    cfg.output_dir = out.to_path_buf();
    Ok(cfg)
}

fn ssl_benefit() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let variants = [
        ("supervised", "variant = none\nlambda_u = 0\nlambda_r = 0\n"),
        ("fixmatch", "variant = none\n"),
        ("BM", "variant = BM\n"),
    ];
    let mut means = Vec::new();
    for (name, extra) in variants {
        let mut acc = Vec::new();
        for seed in 0..5u64 {
            let text = format!("epochs = 100\nema_decay = 0.99\nseed = {seed}\n{extra}");
            let cfg = parse_config(&text, &dir.path().join(format!("{name}{seed}"))).map_err(|e| e.to_string())?;
            let out = Trainer::new(cfg).and_then(|mut t| t.run()).map_err(|e| e.to_string())?;
            acc.push(out.final_test_accuracy.ok_or("no test accuracy")?);
        }
        means.push(acc.iter().sum::<f64>() / acc.len() as f64);
    }
    let (sup, fm, bm) = (means[0], means[1], means[2]);
    let summary = format!("mean test accuracy: supervised {sup:.4}, FixMatch-style {fm:.4}, BM {bm:.4}");
    ensure!(bm >= sup + 0.03, "BM below supervised + 3 points ({summary})");
    ensure!(bm >= fm - 0.01, "BM below FixMatch-style - 1 point ({summary})");
    Ok(summary)
}

fn normalization_invariant() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = parse_config("epochs = 56\n", &dir.path().join("on")).map_err(|e| e.to_string())?;
    let mut trainer = Trainer::new(cfg).map_err(|e| e.to_string())?.stop_after(500);
    let mut worst: f64 = 0.0;
    let mut steps = 0;
    let mut bad = None;
    trainer
        .run_with(|r| {
            steps += 1;
            match r.breakdown.max_pairwise_distance {
                Some(d) if (0.0..=2.0 + 1e-9).contains(&d) => worst = worst.max(d),
                other => {
                    bad.get_or_insert((r.step, other));
                }
            }
            Ok(())
        })
        .map_err(|e| e.to_string())?;
    ensure!(bad.is_none(), "distance out of range at {bad:?}");
    ensure!(steps == 500, "ran {steps} steps");

    let stress = "normalize = false\ninput_scale = 200\nlambda_r = 5\nepochs = 56\nseed = 0\n";
    let out = dir.path().join("off");
    let cfg = parse_config(stress, &out).map_err(|e| e.to_string())?;
    let nan_step = match Trainer::new(cfg).and_then(|mut t| t.run()) {
        Err(Error::NonFiniteLoss { step }) => step,
        Err(e) => return Err(format!("stress run failed with {e}")),
        Ok(o) => return Err(format!("stress run finished {} steps without NaN", o.steps_run)),
    };
    ensure!(out.join("metrics.csv").exists(), "no metrics written before abort");
    Ok(format!(
        "500 steps max distance {worst:.6}; stress config aborted at step {nan_step}"
    ))
}

fn schedule_and_ema() -> Outcome {
    let total = 1000;
    let lr0 = optim::cosine_lr(0, total, 0.03).map_err(|e| e.to_string())?;
    ensure!(lr0 == 0.03, "cosine_lr(0) = {lr0}");
    let end = optim::cosine_lr(total, total, 0.03).map_err(|e| e.to_string())?;
    let want = 0.03 * (7.0 * std::f64::consts::PI / 16.0).cos();
    ensure!((end - want).abs() <= 1e-12, "cosine_lr(S) = {end}, expected {want}");
    let grid = 999;
    let mut prev = f64::INFINITY;
    for s in 0..=grid {
        let v = optim::cosine_lr(s, grid, 0.03).map_err(|e| e.to_string())?;
        ensure!(v <= prev, "not monotone at step {s}");
        prev = v;
    }

    let spec = ModelSpec::mlp(3, &[4], 2);
    let params = model::init_params(&spec, 1).map_err(|e| e.to_string())?;
    let mut ema = EmaState::new(&params, 0.999).map_err(|e| e.to_string())?;
    optim::ema_update(&mut ema, &params).map_err(|e| e.to_string())?;
    for (name, t) in params.iter() {
        ensure!(ema.shadow().get(name).unwrap().data() == t.data(), "fixed point moved for {name}");
    }
    let mut moved = params.clone();
    for (_, t) in moved.iter_mut() {
        t.data_mut().iter_mut().for_each(|v| *v += 1.0);
    }
    optim::ema_update(&mut ema, &moved).map_err(|e| e.to_string())?;
    let mut worst: f64 = 0.0;
    for (name, t) in params.iter() {
        let got = ema.shadow().get(name).unwrap();
        for (g, p) in got.data().iter().zip(t.data()) {
            let want = 0.999 * p + 0.001 * (p + 1.0);
            worst = worst.max((g - want).abs());
        }
    }
    ensure!(worst <= 1e-15, "EMA one-step error {worst:e}");
    Ok(format!("lr(S) error {:.1e}, EMA one-step error {worst:.1e}", (end - want).abs()))
}

fn formats() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let records: Vec<Cifar10Record> = (0..7)
        .map(|_| Cifar10Record {
            label: rng.random_range(0..10),
            pixels: (0..3072).map(|_| rng.random()).collect(),
        })
        .collect();
    let bytes = data::encode_cifar10_binary(&records);
    let parsed = data::parse_cifar10_binary(&bytes).map_err(|e| e.to_string())?;
    ensure!(parsed == records, "CIFAR records changed in round trip");
    ensure!(data::encode_cifar10_binary(&parsed) == bytes, "CIFAR bytes changed in round trip");
    for cut in [1usize, 3072, 3074, 3 * 3073 - 5] {
        match data::parse_cifar10_binary(&bytes[..cut]) {
            Err(Error::Format { offset, .. }) if offset == cut / 3073 * 3073 => {}
            other => return Err(format!("truncation to {cut} bytes gave {other:?}")),
        }
    }

    let rows: Vec<MetricsRow> = (0..20)
        .map(|s| MetricsRow {
            step: s,
            epoch: s / 7,
            lr: rng.random::<f64>() * 0.03,
            supervised_ce: gaussian(&mut rng).abs(),
            unsupervised_ce: gaussian(&mut rng).abs() * 1e-7,
            supervised_rank: gaussian(&mut rng).abs(),
            unsupervised_rank: gaussian(&mut rng).abs(),
            total: gaussian(&mut rng).abs() * 1e3,
            confident_fraction: rng.random(),
            train_accuracy: (s % 2 == 0).then(|| rng.random()),
            validation_accuracy: (s % 3 == 0).then(|| rng.random()),
            test_accuracy: None,
            raw_validation_accuracy: Some(rng.random()),
            max_pairwise_distance: Some(2.0 * rng.random::<f64>()),
            wall_time_ns: rng.random_range(0..1 << 40),
        })
        .collect();
    let mut buf = Vec::new();
    metrics::write_metrics(&mut buf, &rows).map_err(|e| e.to_string())?;
    let back = metrics::parse_metrics(std::str::from_utf8(&buf).unwrap()).map_err(|e| e.to_string())?;
    ensure!(back.len() == rows.len(), "metrics row count changed");
    for (a, b) in rows.iter().zip(&back) {
        let pairs = [
            (a.lr, b.lr),
            (a.supervised_ce, b.supervised_ce),
            (a.unsupervised_ce, b.unsupervised_ce),
            (a.total, b.total),
            (a.confident_fraction, b.confident_fraction),
        ];
        ensure!(
            pairs.iter().all(|(x, y)| rel_err(*x, *y) <= 1e-9) && a.step == b.step && a.wall_time_ns == b.wall_time_ns,
            "metrics row {} changed",
            a.step
        );
        ensure!(
            a.train_accuracy.is_some() == b.train_accuracy.is_some() && a.test_accuracy.is_none() == b.test_accuracy.is_none(),
            "optional metrics field changed in row {}",
            a.step
        );
    }

    let spec = ModelSpec::mlp(5, &[6], 3);
    let params = model::init_params(&spec, 2).map_err(|e| e.to_string())?;
    let split = data::Dataset::new(random_matrix(&mut rng, 9, 5), (0..9).map(|i| i % 3).collect(), 3)
        .map_err(|e| e.to_string())?;
    let mut buf = Vec::new();
    runner::export::write_logits(&mut buf, &spec, &params, &split).map_err(|e| e.to_string())?;
    let rows: Vec<LogitsRow> = runner::export::read_logits(&buf[..]).map_err(|e| e.to_string())?;
    let (repr, logits) = model::model_forward(&spec, &params, split.samples()).map_err(|e| e.to_string())?;
    for (i, r) in rows.iter().enumerate() {
        ensure!(r.true_label == split.labels()[i], "logits label changed at row {i}");
        let close = |a: &[f64], b: &[f64]| a.len() == b.len() && a.iter().zip(b).all(|(x, y)| rel_err(*x, *y) <= 1e-9);
        ensure!(close(&r.logits, logits.row(i)) && close(&r.representation, repr.row(i)), "logits row {i} changed");
    }

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut files = Vec::new();
    for run in ["a", "b"] {
        let cfg = parse_config("epochs = 3\nseed = 9\n", &dir.path().join(run)).map_err(|e| e.to_string())?;
        let out = Trainer::new(cfg).and_then(|mut t| t.run()).map_err(|e| e.to_string())?;
        files.push(std::fs::read(&out.metrics_path).map_err(|e| e.to_string())?);
    }
    ensure!(files[0] == files[1], "same-seed metrics files differ");
    Ok(format!(
        "CIFAR bit-exact, truncations rejected at offsets, CSV round trips, {} identical metrics bytes",
        files[0].len()
    ))
}

fn objective_identity() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = parse_config("epochs = 23\n", dir.path()).map_err(|e| e.to_string())?;
    let o = &cfg.objective;
    ensure!(
        cfg.batch_size == 64
            && cfg.mu == 7
            && o.tau == 0.95
            && o.ranking.margin == 0.5
            && o.ranking.temperature == 0.2
            && o.lambda_u == 1.0
            && o.lambda_r == 1.0,
        "defaults differ: {cfg:?}"
    );
    let (lu, lr) = (o.lambda_u, o.lambda_r);
    let mut trainer = Trainer::new(cfg).map_err(|e| e.to_string())?.stop_after(200);
    let mut worst: f64 = 0.0;
    let mut steps = 0;
    trainer
        .run_with(|r| {
            steps += 1;
            worst = worst.max((r.breakdown.total - r.breakdown.recombine(lu, lr)).abs());
            Ok(())
        })
        .map_err(|e| e.to_string())?;
    ensure!(steps == 200, "ran {steps} steps");
    ensure!(worst <= 1e-12, "identity error {worst:e}");
    Ok(format!("200 steps, worst |total - recombined| {worst:.1e}"))
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("1 loss oracles", loss_oracles),
        ("2 gradient checks", gradient_checks),
        ("3 triplet census", census),
        ("4 compute-cost ordering", compute_cost),
        ("5 desk-scale SSL benefit", ssl_benefit),
        ("6 L2-normalization invariant", normalization_invariant),
        ("7 schedule and EMA", schedule_and_ema),
        ("8 formats", formats),
        ("9 objective identity", objective_identity),
    ];
    let mut failed = Vec::new();
    for (name, run) in criteria {
        let start = Instant::now();
        let result = panic::catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("PASS criterion {name} ({secs:.1}s): {detail}"),
            Err(detail) => {
                println!("FAIL criterion {name} ({secs:.1}s): {detail}");
                failed.push(name);
            }
        }
    }
    println!("{} of 9 criteria passed", 9 - failed.len());
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
