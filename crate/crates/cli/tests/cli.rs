use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn ttsn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ttsn"))
        .args(args)
        .env("TTSN_THREADS", "1")
        .output()
        .expect("spawn ttsn")
}

fn ok(args: &[&str]) -> String {
    let out = ttsn(args);
    assert!(
        out.status.success(),
        "ttsn {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn small_dataset(dir: &Path) -> (String, String) {
    let train = dir.join("train.ttsc");
    let test = dir.join("test.ttsc");
    ok(&[
        "generate", "--per-class", "4", "--frames", "8", "--size", "16", "--seed", "3",
        "--out", p(&train), "--test-out", p(&test), "--test-per-class", "2",
    ]);
    (p(&train).to_owned(), p(&test).to_owned())
}

fn tiny_run(dir: &Path, data: &str, test: &str, extra: &[&str]) -> String {
    let run = dir.join("run");
    let mut args = vec![
        "train", "--data", data, "--test", test, "--epochs", "2", "--lr-steps", "1",
        "--hidden-dim", "8", "--out-dir", p(&run), "--quiet",
    ];
    args.extend_from_slice(extra);
    ok(&args);
    p(&run).to_owned()
}

#[test]
fn generate_reports_counts_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.ttsc");
    let b = dir.path().join("b.ttsc");
    let t = dir.path().join("t.ttsc");
    let out = ok(&["generate", "--out", p(&a), "--test-out", p(&t)]);
    assert!(out.contains("wrote 400 clips"), "{out}");
    assert!(out.contains("wrote 120 clips"), "{out}");
    assert!(out.contains("N=8 C=3 H=32 W=32"), "{out}");
    assert_eq!(out.matches(": 100\n").count(), 4, "{out}");
    ok(&["generate", "--out", p(&b)]);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert_ne!(fs::read(&a).unwrap(), fs::read(&t).unwrap());
}

#[test]
fn generate_rejects_too_few_frames() {
    let dir = tempfile::tempdir().unwrap();
    let out = ttsn(&["generate", "--frames", "1", "--out", p(&dir.path().join("x.ttsc"))]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("N >= 4"), "{err}");
    assert!(!dir.path().join("x.ttsc").exists());
}

#[test]
fn theta_ratio_is_enforced_unless_overridden() {
    let dir = tempfile::tempdir().unwrap();
    let (data, test) = small_dataset(dir.path());
    let run = dir.path().join("bad");
    let out = ttsn(&[
        "train", "--data", &data, "--theta2", "0.5", "--epochs", "2", "--hidden-dim", "8",
        "--lr-steps", "1", "--out-dir", p(&run),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("theta1/theta2"));
    assert!(!run.join("model.ttsn").exists());

    let run = tiny_run(dir.path(), &data, &test, &["--theta2", "0.5", "--allow-theta-override"]);
    let manifest: Value = serde_json::from_str(&fs::read_to_string(Path::new(&run).join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config"]["theta2"], 0.5);
}

#[test]
fn train_eval_and_attention_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (data, test) = small_dataset(dir.path());
    let run = tiny_run(dir.path(), &data, &test, &[]);
    let run = Path::new(&run);

    let manifest: Value = serde_json::from_str(&fs::read_to_string(run.join("manifest.json")).unwrap()).unwrap();
    let metrics = fs::read_to_string(run.join("metrics.jsonl")).unwrap();
    let lines: Vec<Value> = metrics.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines[0]["kind"], "header");
    assert_eq!(lines[0]["config_hash"], manifest["config_hash"]);
    assert_eq!(manifest["config"]["frames"], 8);
    assert_eq!(manifest["config"]["tss"], "rr");
    let epoch = lines.iter().find(|l| l["kind"] == "epoch").expect("epoch record");
    assert!(epoch["test_acc"].is_number());
    assert!(lines.iter().filter(|l| l["kind"] == "step").all(|l| l["total"].as_f64().unwrap().is_finite()));
    assert!(run.join("model.ttsn").exists());

    let out = ok(&["eval", "--run-dir", p(run), "--data", &test]);
    assert!(out.contains("top-1 accuracy:"), "{out}");
    let table: Vec<&str> = out
        .lines()
        .skip_while(|l| !l.starts_with("confusion"))
        .skip(2)
        .take(4)
        .collect();
    assert_eq!(table.len(), 4);
    let total: usize = table
        .iter()
        .flat_map(|row| row.split_whitespace().skip(1))
        .map(|v| v.parse::<usize>().unwrap())
        .sum();
    assert_eq!(total, 8);
    assert!(out.contains("total partner confusions:"));

    let maps = dir.path().join("maps");
    let out = ok(&["attn", "--run-dir", p(run), "--data", &test, "--clip", "1", "--out-dir", p(&maps), "--no-overlay"]);
    assert_eq!(out.lines().count(), 8);
    for f in 0..8 {
        let bytes = fs::read(maps.join(format!("attn_b1_f{f}.pgm"))).unwrap();
        assert!(bytes.starts_with(b"P5\n4 4\n255\n"));
        let pixels = &bytes[bytes.len() - 16..];
        assert_eq!(pixels.iter().min(), Some(&0));
        assert_eq!(pixels.iter().max(), Some(&255));
    }
    ok(&["attn", "--run-dir", p(run), "--data", &test, "--out-dir", p(&maps)]);
    let bytes = fs::read(maps.join("attn_b0_f0.pgm")).unwrap();
    assert!(bytes.starts_with(b"P5\n16 16\n255\n"));

    let corrupt = dir.path().join("corrupt.ttsn");
    fs::write(&corrupt, b"not a checkpoint").unwrap();
    let out = ttsn(&["eval", "--run-dir", p(run), "--data", &test, "--checkpoint", p(&corrupt)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("error:"));
}

#[test]
fn training_without_tss_or_ett() {
    let dir = tempfile::tempdir().unwrap();
    let (data, test) = small_dataset(dir.path());
    let run = tiny_run(dir.path(), &data, &test, &["--tss", "off", "--no-ett"]);
    let manifest: Value = serde_json::from_str(&fs::read_to_string(Path::new(&run).join("manifest.json")).unwrap()).unwrap();
    assert!(manifest["config"]["tss"].is_null());
    assert_eq!(manifest["config"]["theta2"], 0.0);
    let metrics = fs::read_to_string(Path::new(&run).join("metrics.jsonl")).unwrap();
    assert!(metrics.lines().skip(1).all(|l| !l.contains("\"tss\"")));

    let out = ttsn(&["attn", "--run-dir", &run, "--data", &test, "--out-dir", p(&dir.path().join("m"))]);
    assert!(!out.status.success());
}
