use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use aptrack::head::format_prediction;
use aptrack::synthgen::SequenceDataset;

fn aptrack(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_aptrack")).args(args).output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn unknown_subcommand_prints_usage() {
    let out = aptrack(&["teleport"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn unknown_config_key_names_the_module() {
    let dir = tempfile::tempdir().unwrap();
    let out = aptrack(&["train", "--data", s(dir.path()), "--out", s(dir.path()), "--set", "warp=9"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("config: unknown key `warp`"));
}

#[test]
fn missing_data_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = aptrack(&["eval", "--pred", s(dir.path()), "--data", s(&dir.path().join("nope")), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("io:"));
}

#[test]
fn gradcheck_on_a_small_model_passes() {
    let out = aptrack(&[
        "gradcheck", "--set", "dim=8", "--set", "layers=2", "--set", "n_tokens=4", "--set", "ami_layers=1",
        "--set", "head_hidden=8", "--entries", "0",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8_lossy(&out.stdout);
    let err: f64 = text.lines().next().unwrap().split(" = ").nth(1).unwrap().parse().unwrap();
    assert!(err < 1e-4);
}

#[test]
fn gradcheck_fails_on_a_coarse_step() {
    let out = aptrack(&[
        "gradcheck", "--set", "dim=8", "--set", "layers=1", "--set", "n_tokens=4", "--set", "ami_layers=1",
        "--set", "head_hidden=8", "--step", "0.5",
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn eval_of_ground_truth_reports_all_ones() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert!(aptrack(&["synth", "--out", s(&data), "--count", "2", "--frames", "6", "--preset", "random"]).status.success());
    let pred = dir.path().join("pred");
    fs::create_dir_all(&pred).unwrap();
    for name in ["seq_000", "seq_001"] {
        let ds = SequenceDataset::load(&data.join(name)).unwrap();
        let text: String = ds.gt.iter().enumerate().map(|(i, b)| format_prediction(i, &b.with_score(1.0)) + "\n").collect();
        fs::write(pred.join(format!("{name}.txt")), text).unwrap();
    }
    let out = aptrack(&["eval", "--pred", s(&pred), "--data", s(&data), "--out", s(&dir.path().join("eval")), "--jobs", "2"]);
    assert!(out.status.success());
    let report = fs::read_to_string(dir.path().join("eval/report.txt")).unwrap();
    for key in ["precision@20", "success_auc", "mpr@20", "msr_auc", "pr", "re", "f_score"] {
        let line = report.lines().find(|l| l.starts_with(&format!("{key}:"))).unwrap();
        assert_eq!(line, format!("{key}: 1.000000"));
    }
}

#[test]
fn ablate_writes_one_row_per_variant_and_seed() {
    let dir = tempfile::tempdir().unwrap();
    let out = aptrack(&[
        "ablate", "--out", s(dir.path()), "--seeds", "1", "--train-sequences", "1", "--eval-sequences", "1",
        "--frames", "6", "--set", "dim=8", "--set", "layers=2", "--set", "ami_layers=1", "--set", "head_hidden=8",
        "--set", "epochs=1", "--set", "samples_per_epoch=2", "--set", "batch=2", "--set", "n_tokens=32",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(dir.path().join("ablation.csv")).unwrap();
    let variants: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(
        variants,
        ["no-ami", "gmp-only", "lt-only", "full-nt0", "full-nt16", "full-nt32", "full-nt64"]
    );
    assert_eq!(fs::read_to_string(dir.path().join("summary.csv")).unwrap().lines().count(), 8);
}
