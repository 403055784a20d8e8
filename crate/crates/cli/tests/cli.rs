use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn ridepool(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ridepool"))
        .args(args)
        .current_dir(root())
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SMALL: &str = "fixtures/small.toml";

#[test]
fn verify_passes_on_shipped_fixtures() {
    let dir = tempfile::tempdir().unwrap();
    let out = ridepool(&["verify", "-c", SMALL, "-o", path(dir.path())]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(!stdout.contains("FAIL"), "{stdout}");
    assert!(stdout.contains("PASS assignment-fixtures"), "{stdout}");
    assert!(dir.path().join("verify.json").exists());
}

#[test]
fn unknown_override_key_exits_with_config_status() {
    let dir = tempfile::tempdir().unwrap();
    let out = ridepool(&["baseline", "--set", "fleet.wheels=4", "-o", path(dir.path())]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("fleet.wheels"), "{}", stderr(&out));
}

#[test]
fn config_errors_name_the_offending_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[fleet]\nvehicles = 2\nwheels = 4\n").unwrap();
    let out = ridepool(&["baseline", "-c", path(&cfg), "-o", path(dir.path())]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("bad.toml:3:"), "{}", stderr(&out));

    fs::write(&cfg, "[timing]\ntau = -5\n").unwrap();
    let out = ridepool(&["baseline", "-c", path(&cfg), "-o", path(dir.path())]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("timing.tau"), "{}", stderr(&out));

    let out = ridepool(&["baseline", "-c", "no/such/file.toml", "-o", path(dir.path())]);
    assert_eq!(code(&out), 2);
}

#[test]
fn runtime_failures_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = ridepool(&["evaluate", "-c", SMALL, "--checkpoint", "no/such.ckpt", "-o", path(dir.path())]);
    assert_eq!(code(&out), 1, "{}", stderr(&out));
}

#[test]
fn baseline_and_zero_checkpoint_write_identical_summaries() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let base = d.join("base");
    let zero = d.join("zero");
    let eval = d.join("eval");
    assert_eq!(code(&ridepool(&["baseline", "-c", SMALL, "-o", path(&base)])), 0);
    let out = ridepool(&["train", "-c", SMALL, "--zero-init", "--set", "training.episodes=0", "-o", path(&zero)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let ckpt = zero.join("final.ckpt");
    let out = ridepool(&["evaluate", "-c", SMALL, "--checkpoint", path(&ckpt), "-o", path(&eval)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let a = fs::read(base.join("summary.json")).unwrap();
    let b = fs::read(eval.join("summary.json")).unwrap();
    assert_eq!(a, b);
    assert_eq!(
        fs::read(base.join("metrics.jsonl")).unwrap(),
        fs::read(eval.join("metrics.jsonl")).unwrap()
    );
}

#[test]
fn rerun_from_resolved_config_reproduces_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let first = dir.path().join("first");
    let second = dir.path().join("second");
    let out = ridepool(&["baseline", "-c", SMALL, "--set", "timing.tau=200", "-o", path(&first)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let resolved = first.join("resolved-config.toml");
    let text = fs::read_to_string(&resolved).unwrap();
    assert!(text.contains("tau = 200.0") && text.contains("lambda = 400.0"), "{text}");
    let out = ridepool(&["baseline", "-c", path(&resolved), "-o", path(&second)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(
        fs::read(first.join("metrics.jsonl")).unwrap(),
        fs::read(second.join("metrics.jsonl")).unwrap()
    );
}

#[test]
fn training_writes_log_and_checkpoint_then_evaluates() {
    let dir = tempfile::tempdir().unwrap();
    let train = dir.path().join("train");
    let out = ridepool(&["train", "-c", SMALL, "-o", path(&train)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let log = fs::read_to_string(train.join("train-log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);
    let eval = dir.path().join("eval");
    let ckpt = train.join("final.ckpt");
    let out = ridepool(&["evaluate", "-c", SMALL, "--checkpoint", path(&ckpt), "-o", path(&eval)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let summary: serde_json::Value = serde_json::from_slice(&fs::read(eval.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["rows"].as_array().unwrap().len(), 3);

    // A checkpoint for a different architecture is rejected at run time.
    let out = ridepool(&[
        "evaluate", "-c", SMALL, "--set", "value.hidden=5", "--checkpoint", path(&ckpt), "-o", path(&eval),
    ]);
    assert_eq!(code(&out), 1);
}

#[test]
fn generated_network_loads_as_a_file_network() {
    let dir = tempfile::tempdir().unwrap();
    let gen = dir.path().join("gen");
    let out = ridepool(&["gen-network", "--set", "network.rows=4", "--set", "network.cols=3", "-o", path(&gen)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let net = gen.join("network.txt");
    let net_set = format!("network.path={}", path(&net));
    let run = dir.path().join("run");
    let out = ridepool(&[
        "baseline",
        "--set",
        "network.kind=file",
        "--set",
        &net_set,
        "--set",
        "demand.hotspots=[]",
        "--set",
        "timing.horizon=20",
        "--set",
        "evaluation.days=2",
        "-o",
        path(&run),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
}

#[test]
fn bench_reports_dispatch_time() {
    let dir = tempfile::tempdir().unwrap();
    let out = ridepool(&["bench", "-c", SMALL, "-o", path(dir.path())]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let report: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("bench.json")).unwrap()).unwrap();
    assert_eq!(report["epochs"], 90);
    assert_eq!(report["within_budget"], 90);
}
