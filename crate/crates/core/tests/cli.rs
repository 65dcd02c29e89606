//! The `tdnnf-nas` binary: exit codes, artifacts, and agreement with the
//! library calls it wraps.

use std::path::Path;
use std::process::Command;

use tdnnf_nas::lattice::{build_lattice, format_top_n, k_best};
use tdnnf_nas::search::SearchState;
use tdnnf_nas::train::Checkpoint;

const CONFIG: &str = r#"
[space]
num_layers = 2
d_left = 2
d_right = 1
dim_choices = 2, 4
hidden_dim = 6

[search]
method = "softmax"
search_epochs = 1
top_n = 2

[train]
epochs = 1
seed = 4

[data]
task = "context"
num_sequences = 40
frames = 10
feature_dim = 3
num_classes = 3
left_offset = 2
right_offset = 1
"#;

fn bin(dir: &Path, args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_tdnnf-nas"))
        .args(args)
        .current_dir(dir)
        .output()
        .unwrap()
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.cfg"), CONFIG).unwrap();
    dir
}

fn run_ok(dir: &Path, args: &[&str]) -> String {
    let out = bin(dir, args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn search_writes_trajectory_and_checkpoint() {
    let dir = setup();
    let d = dir.path();
    run_ok(d, &["gen-data", "--config", "run.cfg"]);
    run_ok(d, &["search", "--config", "run.cfg", "--method", "pipe-gumbel"]);
    assert!(d.join("out/supernet.tdnf").exists());
    let csv = std::fs::read_to_string(d.join("out/lambda_trajectory.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("step,layer,group,choice,lambda"));
    // Two layers of (3 left + 2 right + 2 dim) rows per snapshot.
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len() % 14, 0);
    assert!(rows.len() > 14);
}

#[test]
fn extract_matches_library_k_best() {
    let dir = setup();
    let d = dir.path();
    run_ok(d, &["gen-data", "--config", "run.cfg"]);
    run_ok(d, &["search", "--config", "run.cfg"]);
    run_ok(d, &["extract", "--config", "run.cfg", "--top", "3"]);
    let written = std::fs::read_to_string(d.join("out/topN.txt")).unwrap();
    let state = SearchState::from_checkpoint(&Checkpoint::load(&d.join("out/supernet.tdnf")).unwrap()).unwrap();
    let lattice = build_lattice(&state.weights, &state.net.space).unwrap();
    let expected = format_top_n(&k_best(&lattice, 3).unwrap(), &state.net.space);
    assert_eq!(written, expected);
    assert_eq!(written.matches("# rank=").count(), 3);
}

#[test]
fn full_pipeline_report_and_overrides() {
    let dir = setup();
    let d = dir.path();
    for cmd in ["gen-data", "search", "extract", "retrain", "oracle", "report"] {
        run_ok(d, &[cmd, "--config", "run.cfg", "--out", "run1", "--seed", "11", "--eta", "0.5"]);
    }
    let report = std::fs::read_to_string(d.join("run1/report.txt")).unwrap();
    assert!(report.contains("selected architecture:\nL1: left="), "{report}");
    assert!(report.contains("parameters: "), "{report}");
    assert!(report.contains("oracle: spearman="), "{report}");
    assert!(d.join("run1/retrain_1.tdnf").exists() && d.join("run1/retrain_2.tdnf").exists());
    let oracle = std::fs::read_to_string(d.join("run1/oracle.csv")).unwrap();
    assert!(oracle.starts_with("candidate,loss,params,nas_prob,oracle_rank,nas_rank\n"));
    // 3·2·2 choices per layer over two layers.
    assert_eq!(oracle.lines().count(), 1 + 144 + 1);
}

#[test]
fn exit_codes() {
    let dir = setup();
    let d = dir.path();
    assert_eq!(bin(d, &["search"]).status.code(), Some(2));
    assert_eq!(bin(d, &["search", "--config", "run.cfg", "--seed", "x"]).status.code(), Some(2));
    assert_eq!(bin(d, &["explode", "--config", "run.cfg"]).status.code(), Some(2));

    let missing = bin(d, &["search", "--config", "run.cfg"]);
    assert_eq!(missing.status.code(), Some(1));
    let msg = String::from_utf8(missing.stderr).unwrap();
    assert_eq!(msg.lines().count(), 1, "{msg}");
    assert!(msg.contains("gen-data"), "{msg}");

    std::fs::write(d.join("bad.cfg"), "[search]\neta = 1\neta = 2\n").unwrap();
    let bad = bin(d, &["gen-data", "--config", "bad.cfg"]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(String::from_utf8(bad.stderr).unwrap().contains("line 3"));

    assert_eq!(bin(d, &["--help"]).status.code(), Some(0));
}
