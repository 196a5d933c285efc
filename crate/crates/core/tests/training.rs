use std::path::Path;

use rankmatch::data::{self, SyntheticSpec};
use rankmatch::runner::{self, ExperimentConfig, Trainer};
use rankmatch::Error;

const SMALL: &str = "\
synthetic.train_per_class = 120
synthetic.validation_per_class = 30
synthetic.test_per_class = 40
num_labels = 12
batch_size = 12
mu = 3
seed = 4
";

fn config(extra: &str, out: &Path) -> ExperimentConfig {
    let epochs = if extra.contains("epochs") { "" } else { "epochs = 4\n" };
    let mut cfg = ExperimentConfig::parse(&format!("{SMALL}{epochs}{extra}")).unwrap();
    cfg.output_dir = out.to_path_buf();
    cfg
}

#[test]
fn resumed_run_writes_identical_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let full = config("", &dir.path().join("full"));
    let straight = Trainer::new(full).unwrap().run().unwrap();
    assert!(straight.completed);

    let out = dir.path().join("split");
    let mut first = Trainer::new(config("", &out)).unwrap().stop_after(17);
    let partial = first.run().unwrap();
    assert!(!partial.completed);
    assert_eq!(partial.steps_run, 17);
    let resumed = Trainer::resume(config("", &out), &out.join("last.ckpt"))
        .unwrap()
        .run()
        .unwrap();
    assert!(resumed.completed);
    assert_eq!(resumed.final_test_accuracy, straight.final_test_accuracy);
    assert_eq!(
        std::fs::read(&straight.metrics_path).unwrap(),
        std::fs::read(&resumed.metrics_path).unwrap()
    );
    assert_eq!(
        std::fs::read(dir.path().join("full/last.ckpt")).unwrap(),
        std::fs::read(out.join("last.ckpt")).unwrap()
    );
}

#[test]
fn checkpoint_evaluation_counts_every_test_sample() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config("", dir.path());
    let outcome = Trainer::new(cfg.clone()).unwrap().run().unwrap();
    let eval = runner::evaluate_checkpoint(&cfg, &dir.path().join("last.ckpt")).unwrap();
    let total: usize = eval.confusion.iter().flatten().sum();
    let correct: usize = (0..eval.confusion.len()).map(|i| eval.confusion[i][i]).sum();
    assert_eq!(total, 4 * 40);
    assert!((eval.accuracy - correct as f64 / total as f64).abs() < 1e-15);
    assert!((eval.accuracy + eval.error_rate - 1.0).abs() < 1e-15);
    assert_eq!(Some(eval.accuracy), outcome.final_test_accuracy);
    for (class, row) in eval.confusion.iter().enumerate() {
        assert_eq!(row.iter().sum::<usize>(), 40, "class {class}");
    }
    assert!(dir.path().join("best.ckpt").exists());
}

#[test]
fn exported_logits_match_evaluation() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config("epochs = 1\n", dir.path());
    Trainer::new(cfg.clone()).unwrap().run().unwrap();
    let ckpt = dir.path().join("last.ckpt");
    let (path, n) = runner::export_checkpoint_logits(&cfg, &ckpt).unwrap();
    let rows = runner::load_logits(&path).unwrap();
    assert_eq!(rows.len(), n);
    let eval = runner::evaluate_checkpoint(&cfg, &ckpt).unwrap();
    let correct = rows.iter().filter(|r| r.true_label == r.predicted_label).count();
    assert!((correct as f64 / n as f64 - eval.accuracy).abs() < 1e-15);
    for (i, r) in rows.iter().enumerate() {
        assert_eq!(r.sample_index, i);
        assert_eq!(r.logits.len(), 4);
        let argmax = (0..4).fold(0, |b, j| if r.logits[j] > r.logits[b] { j } else { b });
        assert_eq!(argmax, r.predicted_label);
    }
}

#[test]
fn non_finite_loss_reports_the_step() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config("normalize = false\ninput_scale = 1e6\nlambda_r = 5\n", dir.path());
    match Trainer::new(cfg).unwrap().run() {
        Err(Error::NonFiniteLoss { step }) => {
            let rows = runner::load_metrics(&dir.path().join("metrics.csv")).unwrap();
            assert_eq!(rows.len(), step);
        }
        other => panic!("expected a NaN abort, got {other:?}"),
    }
}

#[test]
fn saved_synthetic_data_trains_like_generated_data() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SyntheticSpec::dense_blobs(4, 16, 3.0, 1.0, [120, 30, 40], 4);
    let path = dir.path().join("blobs.bin");
    data::save_synthetic(&path, &data::make_synthetic_blobs(&spec).unwrap()).unwrap();

    let a = config("epochs = 1\n", &dir.path().join("a"));
    let b = config(&format!("epochs = 1\ndataset = synthetic-file\nsynthetic_path = {}\n", path.display()), &dir.path().join("b"));
    let ra = Trainer::new(a).unwrap().run().unwrap();
    let rb = Trainer::new(b).unwrap().run().unwrap();
    assert_eq!(
        std::fs::read(ra.metrics_path).unwrap(),
        std::fs::read(rb.metrics_path).unwrap()
    );
}

#[test]
fn config_text_round_trips() {
    let cfg = config("variant = BH\ntau = 0.7\nhidden = 8,8\n", Path::new("out"));
    let again = ExperimentConfig::parse(&cfg.to_text()).unwrap();
    assert_eq!(again, cfg);
}

#[test]
fn config_errors_name_the_line() {
    let err = ExperimentConfig::parse("epochs = 2\nbogus = 1\n").unwrap_err();
    assert!(matches!(&err, Error::Config(m) if m.contains("line 2")), "{err}");
    let err = ExperimentConfig::parse("seed = 1\nseed = 2\n").unwrap_err();
    assert!(matches!(&err, Error::Config(m) if m.contains("line 2")), "{err}");
    assert!(ExperimentConfig::parse("tau = 1.5\n").and_then(|c| c.validate()).is_err());
}
