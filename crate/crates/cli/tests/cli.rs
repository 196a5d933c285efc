use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = "\
synthetic.train_per_class = 60
synthetic.validation_per_class = 20
synthetic.test_per_class = 25
num_labels = 8
batch_size = 8
mu = 2
epochs = 2
bench.sizes = 8,16
bench.repetitions = 5
";

fn rankmatch(args: &[&str], env_dir: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_rankmatch"));
    cmd.args(args).env_remove("RANKMATCH_OUTPUT_DIR");
    if let Some(d) = env_dir {
        cmd.env("RANKMATCH_OUTPUT_DIR", d);
    }
    cmd.output().expect("binary runs")
}

fn write_config(dir: &Path, extra: &str) -> String {
    let path = dir.join("run.cfg");
    fs::write(&path, format!("{SMALL}output_dir = {}\n{extra}", dir.join("out").display())).unwrap();
    path.to_string_lossy().into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn train_eval_and_export() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let out = rankmatch(&["train", &cfg], None);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout(&out).contains("final test accuracy"));
    let run = dir.path().join("out");
    assert!(run.join("metrics.csv").exists());
    assert!(run.join("config.txt").exists());

    let ckpt = run.join("last.ckpt");
    let ckpt = ckpt.to_str().unwrap();
    let eval = rankmatch(&["eval", ckpt, &cfg], None);
    assert!(eval.status.success());
    let text = stdout(&eval);
    assert!(text.contains("accuracy:") && text.contains("confusion"));

    let export = rankmatch(&["export-logits", ckpt, &cfg], None);
    assert!(export.status.success());
    let csv = fs::read_to_string(run.join("logits.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 4 * 25);
    assert!(csv.starts_with("sample_index,true_label,predicted_label,logit_0"));
}

#[test]
fn resume_continues_a_stopped_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    assert!(rankmatch(&["train", &cfg], None).status.success());
    let ckpt = dir.path().join("out/last.ckpt");
    let again = rankmatch(&["train", &cfg, "--resume", ckpt.to_str().unwrap()], None);
    assert!(again.status.success(), "{}", String::from_utf8_lossy(&again.stderr));
}

#[test]
fn bench_and_census_reports() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let bench = rankmatch(&["bench", &cfg], None);
    assert!(bench.status.success());
    let csv = fs::read_to_string(dir.path().join("out/bench.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 * 4);

    let census = rankmatch(&["census", &cfg], None);
    assert!(census.status.success());
    let text = stdout(&census);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "batch_size,class_count,batch_all,batch_hard,batch_mean,pairwise_terms");
    // 16 samples over 10 classes: six pairs and four singletons
    assert_eq!(lines[2], "16,10,168,12,16,256");
}

#[test]
fn output_dir_follows_environment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "seed = 3\n");
    let elsewhere = dir.path().join("env");
    let out = rankmatch(&["train", &cfg], Some(&elsewhere));
    assert!(out.status.success());
    assert!(elsewhere.join("metrics.csv").exists());
    assert!(!dir.path().join("out").exists());
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad = write_config(dir.path(), "tau = 2\n");
    let out = rankmatch(&["train", &bad], None);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error: config error"));

    let nan = write_config(dir.path(), "normalize = false\ninput_scale = 1e6\nlambda_r = 5\n");
    let out = rankmatch(&["train", &nan], None);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("non-finite at step"));

    let missing = dir.path().join("absent.cfg");
    let out = rankmatch(&["train", missing.to_str().unwrap()], None);
    assert_eq!(out.status.code(), Some(1));
}
