use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use idu_core::fixtures::{synthetic_features, synthetic_kdd};
use idu_core::ingest::SchemaName;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

fn idu(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_idu"))
        .args(args)
        .env("RUST_LOG", "error")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = idu(args);
    assert!(
        out.status.success(),
        "{args:?} failed ({:?}):\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

struct Workspace {
    _dir: tempfile::TempDir,
    root: PathBuf,
    raw: PathBuf,
}

fn workspace(per_tag: usize) -> Workspace {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let raw = root.join("raw.txt");
    fs::write(&raw, synthetic_kdd(SchemaName::Kdd99, &[per_tag; 10], 4)).unwrap();
    Workspace { _dir: dir, root, raw }
}

const SMALL: &[&str] = &["--widths", "32,16", "--dk", "8", "--epochs", "12", "--batch", "64", "--lr", "0.003"];

/// build-dataset -> select -> train in one directory; returns it.
fn trained(ws: &Workspace, task: &str) -> PathBuf {
    let out = ws.root.join(format!("run-{task}"));
    let o = p(&out);
    ok(&["build-dataset", "--input", p(&ws.raw), "--schema", "kdd99", "--task", task, "--users", "40", "--sessions", "10", "--out", o]);
    ok(&["select", "--train", &format!("{o}/train.csv"), "--k", "16", "--trees", "30", "--out", o]);
    let (train, features) = (format!("{o}/train.csv"), format!("{o}/features.txt"));
    let mut args = vec!["train", "--train", &train, "--features", &features, "--out", o];
    args.extend_from_slice(SMALL);
    ok(&args);
    out
}

#[test]
fn class_pipeline_through_eval_and_verify() {
    let ws = workspace(40);
    let dir = trained(&ws, "class");
    let d = p(&dir);

    let manifest: Value = serde_json::from_str(&fs::read_to_string(dir.join("dataset.json")).unwrap()).unwrap();
    assert_eq!(manifest["class_names"].as_array().unwrap().len(), 5);

    let feats = fs::read_to_string(dir.join("features.txt")).unwrap();
    let imps: Vec<f64> = feats.lines().skip(4).map(|l| l.split('\t').nth(2).unwrap().parse().unwrap()).collect();
    assert_eq!(imps.len(), 16);
    assert!(imps.windows(2).all(|w| w[0] >= w[1]), "importances not descending");

    ok(&["eval", "--checkpoint", &format!("{d}/model.ckpt"), "--test", &format!("{d}/test.csv"), "--features", &format!("{d}/features.txt"), "--out", d]);
    let report: Value = serde_json::from_str(&fs::read_to_string(dir.join("report.json")).unwrap()).unwrap();
    assert!(report["macro_avg"]["accuracy"].as_f64().unwrap() > 0.95);
    assert!(fs::read_to_string(dir.join("history.csv")).unwrap().lines().count() == 14);

    let v = ok(&["verify", d]);
    assert!(v.contains("ok       model.ckpt"), "{v}");
    assert!(!v.contains("MISMATCH"));

    // a tampered run config no longer matches its digest
    let cfg_path = dir.join("run_config.eval.json");
    let text = fs::read_to_string(&cfg_path).unwrap().replace("\"eval_batch\": 1024", "\"eval_batch\": 7");
    fs::write(&cfg_path, text).unwrap();
    let out = idu(&["verify", d]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stdout).contains("MISMATCH run_config.eval.json"));
}

#[test]
fn predict_labels_an_nmap_record_as_probe() {
    let ws = workspace(40);
    let dir = trained(&ws, "class");
    let d = p(&dir);
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut cells = synthetic_features("nmap", &mut rng);
    cells.push("nmap.".into());
    let out = ok(&[
        "predict",
        "--checkpoint", &format!("{d}/model.ckpt"),
        "--encoder", &format!("{d}/encoder.txt"),
        "--features", &format!("{d}/features.txt"),
        "--schema", "kdd99",
        "--record", &cells.join(","),
    ]);
    let v: Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v["class"], "Probe");
    let probs = v["probabilities"].as_object().unwrap();
    let probe = probs["Probe"].as_f64().unwrap();
    assert!(probs.iter().all(|(k, p)| k == "Probe" || p.as_f64().unwrap() < probe));
    let total: f64 = probs.values().map(|p| p.as_f64().unwrap()).sum();
    assert!((total - 1.0).abs() < 1e-5);

    // feature cells only, without the label
    cells.pop();
    let v: Value = serde_json::from_str(&ok(&[
        "predict",
        "--checkpoint", &format!("{d}/model.ckpt"),
        "--encoder", &format!("{d}/encoder.txt"),
        "--features", &format!("{d}/features.txt"),
        "--schema", "kdd99",
        "--record", &cells.join(","),
    ]))
    .unwrap();
    assert_eq!(v["class"], "Probe");
}

#[test]
fn role_task_builds_four_roles_with_behaviour_columns() {
    let ws = workspace(30);
    let dir = trained(&ws, "role");
    let manifest: Value = serde_json::from_str(&fs::read_to_string(dir.join("dataset.json")).unwrap()).unwrap();
    let roles: Vec<&str> = manifest["class_names"].as_array().unwrap().iter().map(|v| v.as_str().unwrap()).collect();
    assert_eq!(roles.len(), 4);
    assert!(!roles.contains(&"Excluded"));

    let test = fs::read_to_string(dir.join("test.csv")).unwrap();
    let enc = fs::read_to_string(dir.join("encoder.txt")).unwrap();
    let raw_cols = enc.lines().filter(|l| !l.starts_with('#') && l.contains('\t') && !l.starts_with("fitted")).count();
    assert!(raw_cols > 41, "flow and behaviour columns expected, got {raw_cols}");
    assert!(test.lines().count() > 5);
}

#[test]
fn build_dataset_is_idempotent() {
    let ws = workspace(10);
    let out = ws.root.join("ds");
    let files = ["dataset.json", "train.csv", "test.csv", "encoder.txt", "run_config.build-dataset.json"];
    let run = || {
        ok(&["build-dataset", "--input", p(&ws.raw), "--schema", "kdd99", "--seed", "3", "--out", p(&out)]);
        files.map(|f| fs::read(out.join(f)).unwrap())
    };
    let (first, second) = (run(), run());
    for (f, (a, b)) in files.iter().zip(first.iter().zip(&second)) {
        assert_eq!(a, b, "{f}");
    }
}

#[test]
fn dry_run_prints_the_closed_form_count() {
    // input norm 16; block 0: norm 16 + dense 72 + attention 60; block 1 (16 wide in): 32 + 102 + 60; head 22*2+2
    let expected = 16 + (16 + 72 + 60) + (32 + 102 + 60) + 46;
    let cfg = idu_core::model::ModelConfig {
        widths: vec![8, 6],
        d_k: 4,
        ..idu_core::model::ModelConfig::new(8, 2)
    };
    assert_eq!(cfg.learnable_count(), expected);
    let out = ok(&["train", "--dry-run", "--input-dim", "8", "--classes", "2", "--widths", "8,6", "--dk", "4"]);
    assert!(out.contains(&format!("parameters: {expected}\n")), "{out}");
}

#[test]
fn config_file_fills_in_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.conf");
    fs::write(&cfg, "input-dim = 8\nclasses = 2\nwidths = 8,6\ndk = 4\n").unwrap();
    let out = ok(&["train", "--dry-run", "--config", p(&cfg)]);
    assert!(out.contains("parameters: 404\n"), "{out}");
    let out = ok(&["train", "--dry-run", "--config", p(&cfg), "--classes", "3"]);
    assert!(out.contains("parameters: 427\n"), "{out}");
}

#[test]
fn exit_codes_follow_the_failure_class() {
    let dir = tempfile::tempdir().unwrap();
    let d = p(dir.path());
    // config: bad flag value, unknown flag, invalid architecture
    assert_eq!(idu(&["train", "--dry-run", "--widths", "x"]).status.code(), Some(3));
    assert_eq!(idu(&["select", "--bogus"]).status.code(), Some(3));
    assert_eq!(idu(&["train", "--dry-run", "--input-dim", "8", "--classes", "2", "--dk", "0"]).status.code(), Some(3));
    // data: missing file, unknown tag
    assert_eq!(idu(&["select", "--train", &format!("{d}/nope.csv"), "--out", d]).status.code(), Some(2));
    let raw = dir.path().join("raw.txt");
    let mut text = synthetic_kdd(SchemaName::Kdd99, &[3; 10], 1);
    text = text.replacen("normal.", "definitely_not_a_tag.", 1);
    fs::write(&raw, text).unwrap();
    let out = idu(&["build-dataset", "--input", p(&raw), "--schema", "kdd99", "--out", d]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    // numeric: a learning rate that blows the weights up
    let ws = workspace(10);
    let o = p(&ws.root);
    ok(&["build-dataset", "--input", p(&ws.raw), "--schema", "kdd99", "--out", o]);
    ok(&["select", "--train", &format!("{o}/train.csv"), "--k", "8", "--trees", "10", "--out", o]);
    let out = idu(&[
        "train", "--train", &format!("{o}/train.csv"), "--features", &format!("{o}/features.txt"),
        "--widths", "8", "--dk", "4", "--epochs", "5", "--lr", "1e30", "--clip-norm", "0", "--out", o,
    ]);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(ws.root.join("model.ckpt").is_file());
}

#[test]
fn stability_twins_and_scale_outputs() {
    let ws = workspace(12);
    let out = ws.root.join("stab");
    let base = ["--input", p(&ws.raw), "--schema", "kdd99", "--k", "12", "--trees", "10", "--widths", "16,8", "--dk", "4", "--epochs", "2", "--batch", "32"];
    let mut args = vec!["stability", "--runs", "2", "--seed", "5", "--out", p(&out)];
    args.extend(base);
    ok(&args);
    let v: Value = serde_json::from_str(&fs::read_to_string(out.join("stability.json")).unwrap()).unwrap();
    assert_eq!(v["summary"]["completed"], 2);
    assert!(v["summary"]["metrics"]["macro_accuracy"].is_object());
    let csv = fs::read_to_string(out.join("runs.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);

    let out = ws.root.join("scale");
    let mut args = vec!["scale", "--fractions", "0.5,1.0", "--out", p(&out)];
    args.extend(base);
    ok(&args);
    let csv = fs::read_to_string(out.join("scale.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
    assert!(!ok(&["verify", p(&out)]).contains("MISMATCH"));
    assert_eq!(idu(&["scale", "--fractions", "0.5,0.2", "--out", p(&out), "--input", p(&ws.raw)]).status.code(), Some(3));
}
