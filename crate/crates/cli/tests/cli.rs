use std::process::{Command, Output};

fn ascan(dir: &std::path::Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ascan"))
        .current_dir(dir)
        .env_remove("ASCAN_OUT_DIR")
        .args(args)
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn bad_layout_is_a_usage_error_with_column() {
    let tmp = tempfile::tempdir().unwrap();
    let o = ascan(tmp.path(), &["summarize", "--layout", "CCXT"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("column 3"), "{}", stderr(&o));
}

#[test]
fn conflicting_flags_are_usage_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let o = ascan(tmp.path(), &["summarize", "--preset", "c1", "--config", "x.toml"]);
    assert_eq!(o.status.code(), Some(2));
    let o = ascan(tmp.path(), &["sample", "--checkpoint", "missing.ckpt"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("missing.ckpt"));
}

#[test]
fn summarize_json_has_totals() {
    let tmp = tempfile::tempdir().unwrap();
    let o = ascan(tmp.path(), &["summarize", "--preset", "ascan-t", "--json"]);
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(v["total_params"].as_u64().unwrap() > 50_000_000);
    assert!(!tmp.path().join("runs").exists(), "summarize writes files only when asked");
}

#[test]
fn zero_epoch_training_writes_initial_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let o = ascan(tmp.path(), &["--out", "cls", "train-cls", "--epochs", "0"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let dir = tmp.path().join("cls");
    assert!(dir.join("checkpoint.ckpt").exists());
    assert!(!dir.join("metrics.jsonl").exists());
    let m: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["command"], "train-cls");
    assert!(m["checkpoint_hash"].as_str().unwrap().len() == 64);
}

#[test]
fn classifier_checkpoint_cannot_be_sampled() {
    let tmp = tempfile::tempdir().unwrap();
    assert!(ascan(tmp.path(), &["--out", "cls", "train-cls", "--epochs", "0"]).status.success());
    let o = ascan(tmp.path(), &["--out", "s", "sample", "--checkpoint", "cls/checkpoint.ckpt"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn sampled_guidance_rejects_explicit_scale() {
    let tmp = tempfile::tempdir().unwrap();
    assert!(ascan(tmp.path(), &["--out", "d", "train-diff", "--iterations", "2"]).status.success());
    let o = ascan(tmp.path(), &["--out", "s", "sample", "--checkpoint", "d/checkpoint.ckpt", "--scale", "2"]);
    assert_eq!(o.status.code(), Some(2));
    let o = ascan(tmp.path(), &["--out", "s", "sample", "--checkpoint", "d/checkpoint.ckpt", "--n", "3", "--labels", "0,1"]);
    assert_eq!(o.status.code(), Some(2));
    let o = ascan(
        tmp.path(),
        &["--out", "s", "sample", "--checkpoint", "d/checkpoint.ckpt", "--guidance", "constant", "--scale", "2", "--steps", "4", "--labels", "1,2"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["samples.raw", "samples.raw.json", "sample_000.png", "sample_001.png", "manifest.json"] {
        assert!(tmp.path().join("s").join(f).exists(), "{f}");
    }
}
