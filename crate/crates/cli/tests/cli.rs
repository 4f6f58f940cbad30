use std::path::Path;
use std::process::{Command, Output};

use ctrnn_lab_cli::train_cmd::ResultRecord;

fn ctrnn_lab(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ctrnn-lab"))
        .args(args)
        .current_dir(cwd)
        .env_remove("CTRNN_LAB_DATA")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const TINY: &str = "\
# small dense XOR run
task = xor_dense
bits = 4
train_count = 80
test_count = 40
hidden_dim = 4
epochs = 2
batch_size = 16
";

fn tiny_config(dir: &Path) -> String {
    let p = dir.join("tiny.cfg");
    std::fs::write(&p, TINY).unwrap();
    p.display().to_string()
}

#[test]
fn help_and_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&ctrnn_lab(&["--help"], dir.path())), 0);
    assert_eq!(code(&ctrnn_lab(&["frobnicate"], dir.path())), 2);
    assert_eq!(code(&ctrnn_lab(&["gen-data", "--set", "no_such_key=1"], dir.path())), 2);
    assert_eq!(code(&ctrnn_lab(&["gen-data", "--set", "hidden_dim=0"], dir.path())), 2);
    let o = ctrnn_lab(&["diagnose", "flow", "--epsilon", "1.5"], dir.path());
    assert_eq!(code(&o), 2);
}

#[test]
fn gen_data_is_idempotent_and_detects_damage() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let first = ctrnn_lab(&["gen-data", "--config", &cfg], dir.path());
    assert_eq!(code(&first), 0, "{first:?}");
    assert_eq!(stdout(&first).matches("Created").count(), 2);
    let again = ctrnn_lab(&["gen-data", "--config", &cfg], dir.path());
    assert_eq!(code(&again), 0);
    assert_eq!(stdout(&again).matches("Verified").count(), 2);

    let cache = dir.path().join("data/cache");
    let file = std::fs::read_dir(&cache).unwrap().next().unwrap().unwrap().path();
    let mut bytes = std::fs::read(&file).unwrap();
    let n = bytes.len();
    bytes[n - 3] ^= 0xff;
    std::fs::write(&file, bytes).unwrap();
    assert_eq!(code(&ctrnn_lab(&["gen-data", "--config", &cfg], dir.path())), 3);
}

#[test]
fn train_without_cache_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let o = ctrnn_lab(&["train", "--config", &cfg], dir.path());
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8_lossy(&o.stderr).contains("gen-data"));
}

#[test]
fn missing_mnist_files_write_no_cache() {
    let dir = tempfile::tempdir().unwrap();
    let o = ctrnn_lab(
        &["gen-data", "--preset", "desk", "--task", "seqmnist_event"],
        dir.path(),
    );
    assert_eq!(code(&o), 3);
    let cache = dir.path().join("data/cache");
    assert!(!cache.exists() || std::fs::read_dir(&cache).unwrap().next().is_none());
}

#[test]
fn train_then_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    assert_eq!(code(&ctrnn_lab(&["gen-data", "--config", &cfg], dir.path())), 0);
    for (arch, replicas) in [("odelstm", "2"), ("grud", "1")] {
        let o = ctrnn_lab(
            &[
                "train",
                "--config",
                &cfg,
                "--arch",
                arch,
                "--set",
                &format!("replicas={replicas}"),
            ],
            dir.path(),
        );
        assert_eq!(code(&o), 0, "{o:?}");
    }
    let run = dir.path().join("results/xor_dense/odelstm");
    for r in 0..2 {
        for f in ["history.csv", "summary.json", "params.bin"] {
            assert!(run.join(format!("replica-{r}")).join(f).is_file(), "replica {r} {f}");
        }
    }
    let text = std::fs::read_to_string(run.join("result.json")).unwrap();
    let record: ResultRecord = serde_json::from_str(&text).unwrap();
    assert_eq!(record.replicas.len(), 2);
    assert_eq!(record.replicas[1].seed, record.replicas[0].seed + 1);
    assert!(!record.single_sample && !record.partial);
    let text = std::fs::read_to_string(dir.path().join("results/xor_dense/grud/result.json")).unwrap();
    let single: ResultRecord = serde_json::from_str(&text).unwrap();
    assert!(single.single_sample);
    assert_eq!(single.std, 0.0);

    let o = ctrnn_lab(&["report", "results", "--out", "tables"], dir.path());
    assert_eq!(code(&o), 0, "{o:?}");
    let table = std::fs::read_to_string(dir.path().join("tables/table.csv")).unwrap();
    assert_eq!(table.lines().count(), 3);
    assert!(table.contains("grud") && table.contains("single_sample"));
    let curves = std::fs::read_to_string(dir.path().join("tables/curves.csv")).unwrap();
    assert_eq!(curves.lines().count(), 1 + 3 * 2);

    std::fs::remove_file(run.join("replica-1/history.csv")).unwrap();
    let o = ctrnn_lab(&["report", "results", "--out", "tables"], dir.path());
    assert_eq!(code(&o), 0);
    assert!(stdout(&o)
        .lines()
        .any(|l| l.contains("odelstm") && l.contains("partial")));
}

#[test]
fn report_without_records_fails() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::create_dir(dir.path().join("empty")).unwrap();
    assert_eq!(code(&ctrnn_lab(&["report", "empty"], dir.path())), 2);
    assert_eq!(code(&ctrnn_lab(&["report", "absent"], dir.path())), 3);
}

#[test]
fn diagnose_writes_reports() {
    let dir = tempfile::tempdir().unwrap();
    let o = ctrnn_lab(&["diagnose", "jacobians", "--out", "diag"], dir.path());
    assert_eq!(code(&o), 0, "{o:?}");
    assert!(dir.path().join("diag/jacobians.json").is_file());
    let o = ctrnn_lab(&["diagnose", "flow", "--arch", "odelstm", "--out", "diag"], dir.path());
    assert_eq!(code(&o), 0);
    let csv = std::fs::read_to_string(dir.path().join("diag/flow.csv")).unwrap();
    assert!(csv.starts_with("series,lag,norm"));
}
