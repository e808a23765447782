use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use groundlab_core::experiment::ExperimentConfig;
use groundlab_core::model::ModelConfig;
use groundlab_core::trainer::{AblationTable, Variant};
use serde_json::Value;

fn groundlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_groundlab"))
        .args(args)
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = groundlab(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn stderr_json(out: &Output) -> Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text.lines().last().expect("an error line");
    serde_json::from_str(line).unwrap_or_else(|e| panic!("not JSON ({e}): {line}"))
}

fn tiny_config(dir: &Path, seeds: Vec<u64>) -> PathBuf {
    let mut cfg = ExperimentConfig::default();
    cfg.data.train_size = 40;
    cfg.data.test_size = 20;
    cfg.data.augment.images_per_category = 3;
    cfg.model = ModelConfig {
        d_model: 16,
        heads: 2,
        enc_layers: 1,
        dec_layers: 1,
        patch: 16,
        ..ModelConfig::default()
    };
    cfg.train.epochs = 1;
    cfg.train.lr_drop_epoch = 0;
    cfg.train.batch_size = 8;
    cfg.train.seeds = seeds;
    let path = dir.join("cfg.json");
    fs::write(&path, serde_json::to_string(&cfg).unwrap()).unwrap();
    path
}

#[test]
fn unknown_flag_is_a_config_error() {
    let out = groundlab(&["synth", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(stderr_json(&out)["error"], "config");
}

#[test]
fn invalid_config_values_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, r#"{"train": {"mix_ratio": 1.5}}"#).unwrap();
    let o = dir.path().join("out");
    let out = groundlab(&["synth", "--config", cfg.to_str().unwrap(), "--out", o.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let err = stderr_json(&out);
    assert_eq!(err["error"], "config");
    assert!(err["message"].as_str().unwrap().contains("mix_ratio"));

    let missing = dir.path().join("nope.json");
    let out = groundlab(&["synth", "--config", missing.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let out = groundlab(&["train", "--jobs", "0"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn missing_inputs_are_runtime_errors() {
    let dir = tempfile::tempdir().unwrap();
    let o = dir.path().join("empty");
    for cmd in ["train", "eval", "report"] {
        let out = groundlab(&[cmd, "--out", o.to_str().unwrap()]);
        assert_eq!(out.status.code(), Some(2), "{cmd}");
        assert_eq!(stderr_json(&out)["error"], "runtime");
    }
}

#[test]
fn help_and_version_succeed() {
    let out = ok(&["--help"]);
    let text = String::from_utf8_lossy(&out.stdout);
    for cmd in ["synth", "augment", "train", "eval", "ablate", "report"] {
        assert!(text.contains(cmd), "{cmd} missing from help");
    }
    ok(&["--version"]);
}

#[test]
fn synth_is_byte_identical_for_a_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), vec![0]);
    let c = cfg.to_str().unwrap();
    let read = |o: &Path, f: &str| fs::read(o.join("data").join(f)).unwrap();
    let (a, b, other) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    ok(&["synth", "--config", c, "--out", a.to_str().unwrap()]);
    ok(&["synth", "--config", c, "--out", b.to_str().unwrap(), "--jobs", "1"]);
    ok(&["synth", "--config", c, "--out", other.to_str().unwrap(), "--seed", "9"]);
    for f in ["train.scenes.jsonl", "train.samples.jsonl", "test.scenes.jsonl", "test.samples.jsonl"] {
        assert_eq!(read(&a, f), read(&b, f), "{f}");
        assert_ne!(read(&a, f), read(&other, f), "{f}");
    }
}

#[test]
fn augment_manifest_lists_outputs_and_counts() {
    let dir = tempfile::tempdir().unwrap();
    let o = dir.path().join("out");
    ok(&["augment", "--out", o.to_str().unwrap(), "--images-per-category", "50"]);
    let m: Value = serde_json::from_str(&fs::read_to_string(o.join("manifests/augment.json")).unwrap()).unwrap();
    assert_eq!(m["command"], "augment");
    assert_eq!(m["summary"]["images_per_category"], 50);
    for (_, n) in m["summary"]["scenes_per_category"].as_object().unwrap() {
        assert_eq!(n, 50);
    }
    let outputs = m["outputs"].as_array().unwrap();
    assert_eq!(outputs.len(), 2);
    for a in outputs {
        let path = o.join(a["path"].as_str().unwrap());
        let bytes = fs::read(&path).unwrap();
        assert_eq!(a["bytes"], bytes.len());
        assert_eq!(a["sha256"].as_str().unwrap().len(), 64);
    }
}

#[test]
fn ablate_writes_four_rows_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), vec![0, 1]);
    let o = dir.path().join("out");
    ok(&["ablate", "--config", cfg.to_str().unwrap(), "--out", o.to_str().unwrap(), "--jobs", "1"]);
    let table: AblationTable =
        serde_json::from_str(&fs::read_to_string(o.join("ablation/table.json")).unwrap()).unwrap();
    assert_eq!(table.cells.len(), 8);
    for v in Variant::ALL {
        let seeds: Vec<u64> = table.cells_of(v).map(|c| c.seed).collect();
        assert_eq!(seeds, vec![0, 1], "{}", v.label());
    }
    let md = fs::read_to_string(o.join("ablation/table.md")).unwrap();
    assert_eq!(md.lines().count(), 2 + 4);
    ok(&["report", "--config", cfg.to_str().unwrap(), "--out", o.to_str().unwrap()]);
    let fig3 = fs::read_to_string(o.join("report/figure3.csv")).unwrap();
    assert_eq!(fig3.lines().count(), 1 + 4 * 2);
}
