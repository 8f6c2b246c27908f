use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const RECORD: usize = 1 + 3 * 32 * 32;
const RECORDS: usize = 10_000;

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_sparseagg"));
    cmd.env_remove("SPARSEAGG_CIFAR_DIR")
        .env("RUST_LOG", "warn");
    cmd
}

fn specs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../specs")
}

fn run(args: &[&str], out: &Path) -> Output {
    bin().arg("--out").arg(out).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

/// CIFAR-10 binary files with deterministic pixel patterns.
fn write_fake_cifar(dir: &Path) {
    fs::create_dir_all(dir).unwrap();
    let file = |offset: usize| {
        let mut bytes = Vec::with_capacity(RECORDS * RECORD);
        for r in 0..RECORDS {
            let label = (r + offset) % 10;
            bytes.push(label as u8);
            bytes.extend((0..RECORD - 1).map(|i| ((i * (label + 1) + r) % 251) as u8));
        }
        bytes
    };
    for i in 1..=5 {
        fs::write(dir.join(format!("data_batch_{i}.bin")), file(i)).unwrap();
    }
    fs::write(dir.join("test_batch.bin"), file(0)).unwrap();
}

#[test]
fn graph_dot_has_expected_edges() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(
        &[
            "graph",
            "--topology",
            "sparse:2",
            "--layers",
            "8",
            "--format",
            "dot",
        ],
        tmp.path(),
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let dot = fs::read_to_string(tmp.path().join("graph.dot")).unwrap();
    assert_eq!(dot.matches("->").count(), 17);
    assert!(tmp.path().join("run.json").exists());
}

#[test]
fn graph_json_per_block_from_spec() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = specs_dir().join("densenet40.json");
    let o = run(
        &[
            "--spec",
            spec.to_str().unwrap(),
            "graph",
            "--format",
            "json",
        ],
        tmp.path(),
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for b in 1..=3 {
        assert!(tmp.path().join(format!("graph_block{b}.json")).exists());
    }
}

#[test]
fn analyze_reports_published_count_and_is_idempotent() {
    let spec = specs_dir().join("densenet121.json");
    let before = fs::read(&spec).unwrap();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for dir in [a.path(), b.path()] {
        let o = run(
            &[
                "--spec",
                spec.to_str().unwrap(),
                "analyze",
                "--compare",
                "dense,sparse:2",
            ],
            dir,
        );
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    let report = fs::read_to_string(a.path().join("report.csv")).unwrap();
    let total: f64 = report
        .lines()
        .find(|l| l.starts_with("total,"))
        .and_then(|l| l.split(',').nth(4))
        .expect("total row")
        .parse()
        .unwrap();
    assert!((total / 7.98e6 - 1.0).abs() < 0.02, "{total}");
    for file in ["report.csv", "comparison.csv"] {
        assert_eq!(
            fs::read(a.path().join(file)).unwrap(),
            fs::read(b.path().join(file)).unwrap()
        );
    }
    assert_eq!(fs::read(&spec).unwrap(), before);
    let run_json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(a.path().join("run.json")).unwrap()).unwrap();
    assert_eq!(run_json["command"], "analyze");
    assert_eq!(run_json["spec_hash"].as_str().unwrap().len(), 64);
    assert!(run_json["wall_seconds"].as_f64().unwrap() >= 0.0);
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(&["analyze", "--bogus"], tmp.path());
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
}

#[test]
fn invalid_spec_fails_before_any_output() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = tmp.path().join("bad.json");
    fs::write(&spec, r#"{"family": "concat"}"#).unwrap();
    let out = tmp.path().join("out");
    let o = run(&["--spec", spec.to_str().unwrap(), "analyze"], &out);
    assert_eq!(code(&o), 1);
    assert!(!out.exists());
}

#[test]
fn heatmap_rejects_sum_family() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = specs_dir().join("sparse-resnet.json");
    let o = run(&["--spec", spec.to_str().unwrap(), "heatmap"], tmp.path());
    assert_eq!(code(&o), 1);
}

#[test]
fn heatmap_of_untrained_spec() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = specs_dir().join("tiny-sparse.json");
    let o = run(
        &[
            "--spec",
            spec.to_str().unwrap(),
            "heatmap",
            "--format",
            "pgm",
        ],
        tmp.path(),
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let pgm = fs::read(tmp.path().join("heatmap.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n"));
}

#[test]
fn missing_data_is_a_runtime_error() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = specs_dir().join("tiny-sparse.json");
    let missing = tmp.path().join("nowhere");
    let o = run(
        &[
            "--spec",
            spec.to_str().unwrap(),
            "--data",
            missing.to_str().unwrap(),
            "train",
            "--epochs",
            "1",
        ],
        &tmp.path().join("out"),
    );
    assert_eq!(code(&o), 2);
}

#[test]
fn train_then_eval_and_heatmap() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("cifar");
    write_fake_cifar(&data);
    let spec = specs_dir().join("tiny-sparse.json");
    let out = tmp.path().join("run");
    let o = bin()
        .arg("--out")
        .arg(&out)
        .args([
            "--spec",
            spec.to_str().unwrap(),
            "train",
            "--subset",
            "200",
            "--epochs",
            "3",
            "--no-test",
        ])
        .env("SPARSEAGG_CIFAR_DIR", &data)
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let history = fs::read_to_string(out.join("history.csv")).unwrap();
    let mut lines = history.lines();
    assert_eq!(
        lines.next().unwrap(),
        "epoch,lr,train_loss,train_acc,test_err,seconds"
    );
    assert_eq!(lines.count(), 3);
    let checkpoint = out.join("checkpoint");
    assert!(checkpoint.join("manifest.json").exists());

    let eval_out = tmp.path().join("eval");
    let o = bin()
        .arg("--out")
        .arg(&eval_out)
        .args([
            "--data",
            data.to_str().unwrap(),
            "eval",
            "--checkpoint",
            checkpoint.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let eval: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(eval_out.join("eval.json")).unwrap()).unwrap();
    assert_eq!(eval["images"], 10_000);
    assert_eq!(eval["epoch"], 3);

    let heat_out = tmp.path().join("heat");
    let o = run(
        &[
            "heatmap",
            "--checkpoint",
            checkpoint.to_str().unwrap(),
            "--format",
            "csv",
        ],
        &heat_out,
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(heat_out.join("heatmap.csv")).unwrap();
    assert!(csv.contains("# epoch=3"));
}
