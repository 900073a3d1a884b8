use std::path::Path;
use std::process::{Command, Output};

use kdistill::cli::{summarize, summary_markdown, SummaryRow};
use kdistill::data::load_dataset;
use kdistill::metrics::MetricsReport;
use kdistill::training::Method;

fn kdistill(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_kdistill"));
    cmd.args(args).env("RUST_LOG", "warn");
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().unwrap()
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    assert!(!out.status.success());
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn fixture(dir: &Path) -> String {
    let root = dir.join("data");
    ok(&kdistill(&["make-fixture", "--out", root.to_str().unwrap(), "--classes", "3", "--per-class", "8"], &[]));
    root.to_str().unwrap().to_string()
}

const FAST: [(&str, &str); 2] = [("KDISTILL__TRAINING__MAX_EPOCHS", "1"), ("KDISTILL__TRAINING__BATCH_SIZE", "4")];

#[test]
fn fixture_round_trips_through_loader() {
    let dir = tempfile::tempdir().unwrap();
    let root = fixture(dir.path());
    let ds = load_dataset(Path::new(&root), &Path::new(&root).join("manifest.csv")).unwrap();
    assert_eq!(ds.len(), 24);
    assert_eq!(ds.counts, vec![8, 8, 8]);
    assert_eq!(ds.class_names.len(), 3);
}

#[test]
fn unknown_method_lists_choices() {
    let err = stderr(&kdistill(&["distill", "--toy", "--method", "FitNet", "--teacher", "x.ckpt"], &[]));
    assert!(err.contains("FitNet") && err.contains("SSD-KD") && err.contains("WCE-only"), "{err}");
}

#[test]
fn unknown_config_key_named() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, "toy = true\n[training]\nmax_epoch = 3\n").unwrap();
    let err = stderr(&kdistill(&["train-teacher", "--config", cfg.to_str().unwrap()], &[]));
    assert!(err.contains("max_epoch"), "{err}");
}

#[test]
fn full_pipeline_and_run_dir_refusal() {
    let dir = tempfile::tempdir().unwrap();
    let root = fixture(dir.path());
    let teacher_dir = dir.path().join("teacher");
    let t = teacher_dir.to_str().unwrap();
    let common = ["--toy", "--dataset", root.as_str()];
    let train = |extra: &[&str]| {
        let mut args = vec!["train-teacher", "--run-dir", t, "--method", "SSD-KD"];
        args.extend(common);
        args.extend(extra);
        kdistill(&args, &FAST)
    };
    ok(&train(&[]));
    for f in ["history.jsonl", "best.ckpt", "last.ckpt", "report.json", "config.snapshot"] {
        assert!(teacher_dir.join(f).is_file(), "missing {f}");
    }
    assert!(stderr(&train(&[])).contains("--force"));
    ok(&train(&["--force"]));

    let ckpt = teacher_dir.join("best.ckpt");
    let student_dir = dir.path().join("student");
    let mut args = vec!["distill", "--run-dir", student_dir.to_str().unwrap(), "--method", "D-KD", "--teacher", ckpt.to_str().unwrap()];
    args.extend(common);
    ok(&kdistill(&args, &FAST));

    let report = dir.path().join("eval.json");
    let mut args = vec!["evaluate", "--checkpoint", "", "--split", "test", "--out", report.to_str().unwrap()];
    let sbest = student_dir.join("best.ckpt");
    args[2] = sbest.to_str().unwrap();
    args.extend(common);
    ok(&kdistill(&args, &[]));
    let r = MetricsReport::load(&report).unwrap();
    assert_eq!(r.class_names.len(), 3);

    let plots = dir.path().join("plots");
    let out = ok(&kdistill(&["plot", report.to_str().unwrap(), student_dir.join("report.json").to_str().unwrap(), "--out-dir", plots.to_str().unwrap()], &[]));
    assert_eq!(out.lines().count(), 4);
    assert!(plots.join("eval_roc.png").is_file() && plots.join("student_confusion.png").is_file());

    let image = Path::new(&root).join("images").join("img_00000.png");
    let cams = dir.path().join("cam");
    let cam = |class: &str| kdistill(&["cam", "--checkpoint", sbest.to_str().unwrap(), "--image", image.to_str().unwrap(), "--class", class, "--out-dir", cams.to_str().unwrap()], &[]);
    ok(&cam("2"));
    assert!(cams.join("cam_heat.png").is_file() && cams.join("cam_overlay.png").is_file());
    assert!(stderr(&cam("3")).contains("class index 3"));
}

#[test]
fn distill_without_teacher_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let root = fixture(dir.path());
    let err = stderr(&kdistill(&["distill", "--toy", "--dataset", &root, "--method", "BLKD", "--run-dir", dir.path().join("s").to_str().unwrap()], &FAST));
    assert!(err.contains("teacher"), "{err}");
}

#[test]
fn sweep_writes_summary() {
    let dir = tempfile::tempdir().unwrap();
    let root = fixture(dir.path());
    let run = dir.path().join("sweep");
    let out = ok(&kdistill(
        &["sweep", "--toy", "--dataset", &root, "--run-dir", run.to_str().unwrap(), "--seeds", "0,1", "--methods", "WCE-only,BLKD"],
        &FAST,
    ));
    assert!(out.contains("| BLKD | 2 |"), "{out}");
    let rows: Vec<SummaryRow> = serde_json::from_str(&std::fs::read_to_string(run.join("summary.json")).unwrap()).unwrap();
    assert_eq!(rows.iter().map(|r| r.method.as_str()).collect::<Vec<_>>(), ["WCE-only", "BLKD"]);
    assert!(run.join("teachers").join("plain-seed1").join("best.ckpt").is_file());
    assert!(run.join("blkd").join("seed0").join("report.json").is_file());
}

#[test]
fn summary_aggregates_mean_and_sample_std() {
    let names = vec!["a".to_string(), "b".to_string()];
    let perfect = MetricsReport::from_scores(&[vec![0.9, 0.1], vec![0.1, 0.9]], &[0, 1], &names).unwrap();
    let half = MetricsReport::from_scores(&[vec![0.9, 0.1], vec![0.9, 0.1]], &[0, 1], &names).unwrap();
    let rows = summarize(&[(Method::SsdKd, 0, perfect.clone()), (Method::WceOnly, 0, half.clone()), (Method::SsdKd, 1, half)]);
    assert_eq!(rows[0].method, "SSD-KD");
    assert_eq!(rows[0].runs, 2);
    assert_eq!(rows[0].acc.mean, 0.75);
    assert!((rows[0].acc.std - (0.125f64).sqrt()).abs() < 1e-12);
    assert_eq!(rows[1].acc.std, 0.0);
    assert!(summary_markdown(&rows).contains("| WCE-only | 1 |"));
}
