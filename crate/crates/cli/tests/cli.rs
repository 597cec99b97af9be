use std::path::Path;
use std::process::{Command, Output};

use knode_mpc_cli::manifest::{read_json, Certificate, EnsembleManifest};
use knode_mpc_cli::metrics::Metrics;
use knode_mpc_cli::report::{BANDS_HEADER, PER_RUN_HEADER, SUMMARY_HEADER};

/// Small pendulum run: one second of data, two narrow members.
const SMALL: &[&str] = &[
    "--set",
    "data.duration=1.0",
    "--set",
    "train.widths=[4, 6]",
    "--set",
    "train.epochs=20",
    "--set",
    "weights.iterations=50",
    "--set",
    "certify.samples=500",
    "--set",
    "evaluate.prediction_runs=2",
    "--set",
    "evaluate.closed_loop_runs=1",
    "--set",
    "evaluate.prediction_duration=0.5",
    "--set",
    "evaluate.closed_loop_duration=0.5",
];

fn knode_mpc(args: &[&str], extra: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_knode-mpc"))
        .args(args)
        .args(extra)
        .env_remove("KNODE_MPC_OUT")
        .output()
        .expect("binary runs")
}

fn stage(name: &str, out: &Path, extra: &[&str]) -> Output {
    let dir = out.to_str().unwrap();
    let mut args = vec![name, "--out", dir];
    args.extend_from_slice(SMALL);
    knode_mpc(&args, extra)
}

fn ok(output: Output) -> Output {
    assert!(
        output.status.success(),
        "exit {:?}: {}",
        output.status.code(),
        String::from_utf8_lossy(&output.stderr)
    );
    output
}

fn data_rows(path: &Path) -> usize {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#') && !l.starts_with('t'))
        .count()
}

#[test]
fn one_second_at_ten_milliseconds_is_a_hundred_samples() {
    let dir = tempfile::tempdir().unwrap();
    ok(stage("collect", dir.path(), &[]));
    let text = std::fs::read_to_string(dir.path().join("dataset.csv")).unwrap();
    assert_eq!(data_rows(&dir.path().join("dataset.csv")), 100);
    assert!(text.contains("config_hash"));
    assert!(text.contains("seed"));
}

#[test]
fn collection_is_reproducible() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    ok(stage("collect", a.path(), &[]));
    ok(stage("collect", b.path(), &["--threads", "2"]));
    let read = |d: &Path| std::fs::read(d.join("dataset.csv")).unwrap();
    assert_eq!(read(a.path()), read(b.path()));
}

#[test]
fn full_pipeline_writes_consistent_records() {
    let dir = tempfile::tempdir().unwrap();
    for name in ["collect", "train", "certify"] {
        ok(stage(name, dir.path(), &[]));
    }
    ok(stage("evaluate", dir.path(), &["--telemetry"]));

    let manifest: EnsembleManifest = read_json(&dir.path().join("ensemble.json")).unwrap();
    assert_eq!(manifest.members.len(), 2);
    assert!(manifest.weights.optimized_loss <= manifest.weights.equal_loss);
    let cert: Certificate = read_json(&dir.path().join("certificate.json")).unwrap();
    assert!(cert.passed);

    let metrics = Metrics::read(&dir.path().join("metrics.json")).unwrap();
    assert_eq!(metrics.provenance, manifest.provenance);
    assert_eq!(metrics.provenance, cert.provenance);
    assert!(metrics.prediction["true"].successful().iter().all(|&m| m < 1e-10));
    for name in ["nominal", "member-0", "member-1", "equal", "optimized"] {
        assert_eq!(metrics.closed_loop[name]["steady_state_error"].values.len(), 1);
    }
    let telemetry: Vec<_> = std::fs::read_dir(dir.path().join("telemetry")).unwrap().collect();
    assert_eq!(telemetry.len(), 5);

    let tables = dir.path().join("tables");
    let metrics_path = dir.path().join("metrics.json");
    ok(knode_mpc(&["report", metrics_path.to_str().unwrap(), "--out", tables.to_str().unwrap()], &[]));
    let summary = std::fs::read_to_string(tables.join("summary.csv")).unwrap();
    assert!(summary.starts_with('#'));
    assert!(summary.contains(SUMMARY_HEADER));
    // One run per closed-loop scheme: every quantile collapses.
    let row = summary.lines().find(|l| l.contains(",closed_loop,equal,steady_state_error,")).unwrap();
    let fields: Vec<&str> = row.split(',').collect();
    assert!(fields[6..].iter().all(|f| f == &fields[6]));
}

#[test]
fn single_member_gets_unit_weight() {
    let dir = tempfile::tempdir().unwrap();
    ok(stage("collect", dir.path(), &[]));
    ok(stage("train", dir.path(), &["--set", "train.widths=[5]"]));
    let manifest: EnsembleManifest = read_json(&dir.path().join("ensemble.json")).unwrap();
    assert_eq!(manifest.weights.equal, vec![1.0]);
    assert_eq!(manifest.weights.optimized, vec![1.0]);
}

#[test]
fn report_without_inputs_writes_headers_only() {
    let dir = tempfile::tempdir().unwrap();
    ok(knode_mpc(&["report", "--out", dir.path().to_str().unwrap()], &[]));
    for (file, header) in [
        ("summary.csv", SUMMARY_HEADER),
        ("per_run.csv", PER_RUN_HEADER),
        ("bands.csv", BANDS_HEADER),
    ] {
        assert_eq!(std::fs::read_to_string(dir.path().join(file)).unwrap(), format!("{header}\n"));
    }
}

#[test]
fn exit_codes_follow_the_failure_kind() {
    let dir = tempfile::tempdir().unwrap();
    let code = |o: Output| o.status.code().unwrap();

    assert_eq!(code(knode_mpc(&["frobnicate"], &[])), 1);
    assert_eq!(code(knode_mpc(&["--help"], &[])), 0);
    assert_eq!(code(stage("collect", dir.path(), &["--set", "mpc.horizon=0"])), 1);
    assert_eq!(code(stage("collect", dir.path(), &["--set", "no.such.key=1"])), 1);
    // Nothing collected yet.
    assert_eq!(code(stage("train", dir.path(), &[])), 1);
    assert_eq!(code(stage("evaluate", dir.path(), &[])), 1);
    let bogus = dir.path().join("bogus.json");
    std::fs::write(&bogus, "{}").unwrap();
    assert_eq!(code(knode_mpc(&["report", bogus.to_str().unwrap()], &[])), 1);
    // A divergent learning rate leaves no surviving member.
    ok(stage("collect", dir.path(), &[]));
    assert_eq!(code(stage("train", dir.path(), &["--set", "train.learning_rate=1e30"])), 2);
    // An input box that excludes the equilibrium input leaves no terminal set.
    let out = stage("certify", dir.path(), &["--set", "mpc.u_lower=[0.5]"]);
    assert_eq!(code(out), 3);
    let cert: Certificate = read_json(&dir.path().join("certificate.json")).unwrap();
    assert!(!cert.passed);
}
