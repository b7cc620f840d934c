//! End-to-end runs of the `dacl` binary on small datasets.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use dacl_cli::embeddings_csv;
use serde_json::Value;

fn dacl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dacl")).args(args).env("DACL_THREADS", "1").output().expect("spawn dacl")
}

fn ok(args: &[&str]) -> Output {
    let out = dacl(args);
    assert!(out.status.success(), "dacl {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn gen(dir: &Path, scenes: usize, seed: u64) {
    ok(&["gen-data", "--out", p(dir), "--scenes", &scenes.to_string(), "--seed", &seed.to_string()]);
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn short_train(data: &Path, run: &Path, extra: &[&str]) {
    let mut args = vec!["train", "--data", p(data), "--out", p(run), "--iters", "40", "--set", "warmup_gate_iters=10"];
    args.extend_from_slice(extra);
    ok(&args);
}

#[test]
fn gen_data_splits_and_reruns_identically() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path().join("data");
    gen(&d, 100, 5);
    let m = json(&d.join("manifest.json"));
    let len = |k: &str| m["split"][k].as_array().unwrap().len();
    assert_eq!((len("labeled"), len("unlabeled"), len("test")), (4, 76, 20));

    let before: Vec<(String, Vec<u8>)> = {
        let mut v: Vec<_> = fs::read_dir(&d)
            .unwrap()
            .map(|e| e.unwrap())
            .map(|e| (e.file_name().into_string().unwrap(), fs::read(e.path()).unwrap()))
            .collect();
        v.sort();
        v
    };
    // a second run into a populated directory needs --force
    let refused = dacl(&["gen-data", "--out", p(&d), "--scenes", "100", "--seed", "5"]);
    assert_eq!(refused.status.code(), Some(2));
    ok(&["gen-data", "--out", p(&d), "--scenes", "100", "--seed", "5", "--force"]);
    for (name, bytes) in &before {
        assert_eq!(&fs::read(d.join(name)).unwrap(), bytes, "{name} changed");
    }
}

#[test]
fn bad_flags_exit_with_config_code() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path().join("data");
    let out = dacl(&["gen-data", "--out", p(&d), "--labeled-frac", "0"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!String::from_utf8_lossy(&out.stderr).is_empty());

    gen(&d, 12, 1);
    let run = tmp.path().join("run");
    let unknown = dacl(&["train", "--data", p(&d), "--out", p(&run), "--set", "no_such_key=1"]);
    assert_eq!(unknown.status.code(), Some(2));
    let row = dacl(&["train", "--data", p(&d), "--out", p(&run), "--ablate", "row-nine"]);
    assert_eq!(row.status.code(), Some(2));
    let missing = dacl(&["eval", "--run", p(&tmp.path().join("nowhere"))]);
    assert_eq!(missing.status.code(), Some(3));
}

#[test]
fn ablation_row_is_recorded_and_zero_weight_disables_contrast() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path().join("data");
    gen(&d, 20, 2);

    let run = tmp.path().join("pcl");
    short_train(&d, &run, &["--ablate", "pcl"]);
    let m = json(&run.join("manifest.json"));
    assert_eq!(m["ablation"], "pcl");
    assert_eq!(m["toggles"]["pcl_random_sampling"], true);
    assert_eq!(m["config"]["pcl_random_sampling"], true);
    for key in ["config", "train_log", "eval_report", "checkpoint", "banks"] {
        assert!(Path::new(m["outputs"][key].as_str().unwrap()).exists(), "{key} missing");
    }

    let off = tmp.path().join("off");
    short_train(&d, &off, &["--lambda-cl", "0"]);
    let log = fs::read_to_string(off.join("train_log.jsonl")).unwrap();
    let lines: Vec<Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 40);
    assert!(lines.iter().all(|l| l["loss_cl"] == 0.0 && l["lambda_cl"] == 0.0));

    let on = tmp.path().join("on");
    short_train(&d, &on, &[]);
    let log = fs::read_to_string(on.join("train_log.jsonl")).unwrap();
    let lines: Vec<Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert!(lines[..10].iter().all(|l| l["lambda_cl"] == 0.0));
    assert!(lines[10..].iter().all(|l| l["lambda_cl"].as_f64().unwrap() > 0.0));
    assert!(lines.iter().any(|l| l["loss_cl"] != 0.0));
}

#[test]
fn eval_and_embedding_dump_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path().join("data");
    gen(&d, 20, 3);
    let run = tmp.path().join("run");
    short_train(&d, &run, &[]);

    let report_path = tmp.path().join("again.json");
    ok(&["eval", "--run", p(&run), "--out", p(&report_path)]);
    assert_eq!(json(&report_path), json(&run.join("eval_report.json")));
    let r = json(&report_path);
    assert_eq!(r["n_cases"], 4);
    for c in ["1", "2", "3"] {
        let dice = r["per_class"][c]["dice"].as_f64().unwrap();
        assert!((0.0..=100.0).contains(&dice));
    }

    let out = ok(&["dump-embeddings", "--run", p(&run)]);
    let scores: Value = serde_json::from_slice(&out.stdout).unwrap();
    for k in ["silhouette", "davies_bouldin", "v_measure"] {
        assert!(scores[k].is_number(), "{k} missing from {scores}");
    }
    let text = fs::read_to_string(run.join("embeddings.csv")).unwrap();
    let header = text.lines().next().unwrap();
    assert_eq!(header.split(',').count(), 4 + 16);
    assert!(text.lines().skip(1).all(|l| l.split(',').count() == 20));
    let rows = embeddings_csv::read(&text).unwrap();
    assert!(!rows.is_empty());
    for (_, e) in &rows {
        assert!(e.is_normalized());
        assert!(e.class_id < 4);
    }
    let preds = embeddings_csv::read_predictions(&fs::read_to_string(run.join("predictions.csv")).unwrap()).unwrap();
    assert_eq!(preds.len(), rows.len());
}

#[test]
fn selftest_passes() {
    let out = ok(&["selftest"]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.lines().count() >= 6);
    assert!(text.lines().all(|l| l.starts_with("PASS ")));
}
