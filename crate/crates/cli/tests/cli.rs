//! End-to-end runs of the `hufu` binary on a small pipeline.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use serde_json::Value;

fn hufu(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hufu"))
        .args(args)
        .current_dir(dir)
        .env_remove("HUFU_KEY_HEX")
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> Value {
    let out = hufu(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("manifest is JSON")
}

/// Carrier, key and trained watermarked host, built once.
fn pipeline() -> &'static Path {
    static DIR: OnceLock<PathBuf> = OnceLock::new();
    DIR.get_or_init(|| {
        let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("cli-pipeline");
        let _ = std::fs::remove_dir_all(&dir);
        std::fs::create_dir_all(&dir).unwrap();
        for (family, per_class, seed, out) in [
            ("bars", "60", "1", "ds"),
            ("bars", "30", "2", "ds-test"),
            ("shapes", "60", "3", "dt"),
            ("shapes", "30", "4", "dt-test"),
        ] {
            ok(&dir, &["gen-data", "--family", family, "--per-class", per_class, "--seed", seed, "--out", out]);
        }
        ok(&dir, &["gen-hufu", "--ds", "ds", "--ds-test", "ds-test", "--out", "hufu.bin"]);
        ok(&dir, &["keygen", "--seed", "42", "--out", "key.hex"]);
        ok(&dir, &["keygen", "--seed", "43", "--out", "other.hex"]);
        ok(&dir, &["init", "--seed", "0", "--out", "host.bin"]);
        ok(&dir, &["embed", "--host", "host.bin", "--hufu", "hufu.bin", "--key-file", "key.hex", "--out", "wm0.bin"]);
        ok(&dir, &["train", "--model", "wm0.bin", "--data", "dt", "--epochs", "8", "--out", "wm.bin"]);
        dir
    })
}

fn verify(dir: &Path, suspect: &str, key: &str, extra: &[&str]) -> (i32, Value) {
    let mut args =
        vec!["verify", "--suspect", suspect, "--hufu", "hufu.bin", "--key-file", key, "--ds-test", "ds-test"];
    args.extend_from_slice(extra);
    let out = hufu(dir, &args);
    let code = out.status.code().unwrap();
    let report = if code == 2 { Value::Null } else { serde_json::from_slice(&out.stdout).unwrap() };
    (code, report)
}

#[test]
fn untouched_model_verifies_with_zero_difference() {
    let dir = pipeline();
    let (code, report) = verify(dir, "wm.bin", "key.hex", &[]);
    assert_eq!(code, 0);
    assert_eq!(report["report"]["verification"]["diff_acc"], 0.0);
    assert_eq!(report["schema_version"], 1);
}

#[test]
fn shuffled_model_needs_restore() {
    let dir = pipeline();
    ok(dir, &["attack", "shuffle", "--seed", "7", "--model", "wm.bin", "--out", "shuffled.bin"]);
    assert_eq!(verify(dir, "shuffled.bin", "key.hex", &[]).0, 1);
    let (code, report) = verify(dir, "shuffled.bin", "key.hex", &["--restore", "--reference", "wm.bin"]);
    assert_eq!(code, 0);
    assert_eq!(report["report"]["verification"]["restore_applied"], "full");
}

#[test]
fn wrong_key_is_negative_near_chance() {
    let dir = pipeline();
    let (code, report) = verify(dir, "wm.bin", "other.hex", &[]);
    assert_eq!(code, 1);
    let acc = report["report"]["verification"]["acc_combined"].as_f64().unwrap();
    assert!((acc - 0.25).abs() <= 0.15, "combined accuracy {acc}");
}

#[test]
fn key_from_environment() {
    let dir = pipeline();
    let hex = std::fs::read_to_string(dir.join("key.hex")).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_hufu"))
        .args(["verify", "--suspect", "wm.bin", "--hufu", "hufu.bin", "--ds-test", "ds-test"])
        .current_dir(dir)
        .env("HUFU_KEY_HEX", hex.trim())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
}

#[test]
fn operational_failures_exit_two() {
    let dir = pipeline();
    assert_eq!(verify(dir, "missing.bin", "key.hex", &[]).0, 2);
    std::fs::write(dir.join("short.hex"), "abcd").unwrap();
    assert_eq!(verify(dir, "wm.bin", "short.hex", &[]).0, 2);
    let no_key = hufu(dir, &["verify", "--suspect", "wm.bin", "--hufu", "hufu.bin", "--ds-test", "ds-test"]);
    assert_eq!(no_key.status.code(), Some(2));
    // The carrier file is required to carry its recorded accuracy.
    let out = hufu(
        dir,
        &["verify", "--suspect", "wm.bin", "--hufu", "host.bin", "--key-file", "key.hex", "--ds-test", "ds-test"],
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn attacks_and_restore_write_records() {
    let dir = pipeline();
    for attack in [
        vec!["prune", "--fraction", "0.1"],
        vec!["scale", "--seed", "3"],
        vec!["expand", "--layer", "1", "--k", "4"],
        vec!["cutoff", "--layer", "0", "--channels", "1"],
        vec!["supplement", "--layer", "2", "--k", "2"],
        vec!["synthetic", "--prune", "0.1"],
    ] {
        let mut args = vec!["attack"];
        args.extend(&attack);
        args.extend(["--model", "wm.bin", "--out", "attacked.bin"]);
        let m = ok(dir, &args);
        assert!(m["report"]["kind"].is_string(), "{attack:?}");
        let (code, _) = verify(dir, "attacked.bin", "key.hex", &["--restore", "--reference", "wm.bin"]);
        assert_eq!(code, 0, "{attack:?}");
    }
    let m = ok(dir, &["restore", "--suspect", "attacked.bin", "--reference", "wm.bin", "--out", "restored.bin"]);
    assert!(m["report"]["restored_rate"].as_f64().unwrap() > 0.9);
}

#[test]
fn runs_are_reproducible_from_manifest() {
    let dir = pipeline();
    let m = ok(dir, &["init", "--seed", "5", "--widths", "4,4", "--out", "a.bin", "--manifest", "a.json"]);
    let args = &m["command"]["init"];
    let widths: Vec<String> = args["arch"]["widths"].as_array().unwrap().iter().map(|w| w.to_string()).collect();
    ok(dir, &["init", "--seed", &args["seed"].to_string(), "--widths", &widths.join(","), "--out", "b.bin"]);
    assert_eq!(std::fs::read(dir.join("a.bin")).unwrap(), std::fs::read(dir.join("b.bin")).unwrap());
    let saved: Value = serde_json::from_str(&std::fs::read_to_string(dir.join("a.json")).unwrap()).unwrap();
    assert_eq!(saved, m);
}

#[test]
fn audits_report_json() {
    let dir = pipeline();
    let m = ok(dir, &["audit", "keysearch", "--host", "wm.bin", "--trials", "20"]);
    assert!(m["report"]["search"]["max_satisfying_kernels"].as_u64().unwrap() <= 5);
    let m = ok(
        dir,
        &[
            "audit",
            "keysearch",
            "--host",
            "wm.bin",
            "--trials",
            "5",
            "--hypothesis",
            "claimed",
            "--record",
            "wm0.bin",
            "--key-file",
            "key.hex",
        ],
    );
    assert_eq!(m["report"]["given_key_count"], 36);
    let m = ok(dir, &["audit", "match", "--host", "wm.bin", "--forged", "hufu.bin", "--ds-test", "ds-test"]);
    assert_eq!(m["report"]["found_fraction"], 1.0);
    let m = ok(dir, &["audit", "histogram", "--a", "wm.bin", "--b", "wm.bin"]);
    assert_eq!(m["report"]["distance"], 0.0);
}
