use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn ame(args: &[&str], threads: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_ame"));
    cmd.args(args).env("RUST_LOG", "warn");
    if let Some(t) = threads {
        cmd.env("AME_THREADS", t);
    }
    cmd.output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = ame(args, None);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Small experiment config written next to the outputs.
fn write_config(dir: &Path, extra: Value) -> PathBuf {
    let mut cfg = json!({
        "seed": 3,
        "data": {
            "train": {"synthetic": {"count": 24, "length": 96, "seed": 1}},
            "eval": {"synthetic": {"count": 12, "length": 96, "seed": 2}},
            "finetune": {"synthetic": {"count": 12, "length": 96, "seed": 4, "noise_level": 0.6}}
        },
        "model": {"backbone": {
            "d_model": 8, "n_layers": 2, "n_heads": 2, "experts_total": 5, "top_k": 2,
            "patch_len": 8, "max_tokens": 32, "expert_hidden": 12
        }},
        "train": {"steps": 5, "batch_size": 4, "context_len": 32, "horizon_len": 8,
                  "optim": {"warmup_steps": 2}},
        "regime": {"n_crops": 200, "crop_len": 32, "train": {"max_epochs": 3}},
        "eval": {"horizon_len": 8},
        "finetune": {"steps": 0, "probe_windows": 6}
    });
    merge(&mut cfg, extra);
    let path = dir.join("config.in.json");
    fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

fn merge(a: &mut Value, b: Value) {
    match (a, b) {
        (Value::Object(a), Value::Object(b)) => {
            for (k, v) in b {
                merge(a.entry(k).or_insert(Value::Null), v);
            }
        }
        (a, b) => *a = b,
    }
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn jsonl(path: &Path) -> Vec<Value> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn synth_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.jsonl");
    let b = dir.path().join("b.jsonl");
    for f in [&a, &b] {
        ok(&["synth", "--count", "7", "--length", "64", "--seed", "9", "--out", p(f)]);
    }
    let text = fs::read_to_string(&a).unwrap();
    assert_eq!(text, fs::read_to_string(&b).unwrap());
    assert_eq!(text.lines().count(), 7);

    let prof = dir.path().join("profiles.jsonl");
    ok(&["profile", "--data", p(&a), "--out", p(&prof)]);
    let lines = jsonl(&prof);
    assert_eq!(lines.len(), 7);
    for l in &lines {
        for k in ["r_f", "r_s", "r_t", "r_sp"] {
            let v = l[k].as_f64().unwrap();
            assert!((0.0..=1.0).contains(&v));
        }
    }
}

#[test]
fn eval_of_the_naive_adapter_is_exactly_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), json!({"eval": {"sweep": true}}));
    let out = dir.path().join("naive");
    ok(&["eval", "--config", p(&cfg), "--naive", "--out", p(&out)]);
    let m = read_json(&out.join("metrics.json"));
    for k in ["mase", "smape", "mae", "rmse"] {
        assert_eq!(m["metrics"]["aggregate"][k].as_f64(), Some(1.0), "{k}");
    }
}

#[test]
fn failures_exit_nonzero_with_a_diagnostic() {
    let dir = tempfile::tempdir().unwrap();
    assert!(!ame(&["frobnicate"], None).status.success());

    let cfg = write_config(dir.path(), json!({"loss": {"lambda_pior": 0.5}}));
    let out = ame(&["train", "--config", p(&cfg), "--out", p(&dir.path().join("x"))], None);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("loss") && err.contains("lambda_pior"), "{err}");

    let cfg = write_config(dir.path(), json!({}));
    let out = ame(&["train", "--config", p(&cfg), "--preset", "enormous", "--out", p(&dir.path().join("y"))], None);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("model.preset"));
}

#[test]
fn runs_do_not_depend_on_thread_count() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), json!({}));
    let mut logs = Vec::new();
    for threads in ["1", "4"] {
        let out = dir.path().join(format!("t{threads}"));
        let o = ame(&["train", "--config", p(&cfg), "--out", p(&out)], Some(threads));
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        logs.push((
            fs::read(out.join("train_log.jsonl")).unwrap(),
            fs::read(out.join("checkpoint").join("weights.bin")).unwrap(),
        ));
    }
    assert_eq!(logs[0], logs[1]);
}

#[test]
fn seed_flag_changes_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), json!({}));
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    ok(&["train", "--config", p(&cfg), "--out", p(&a)]);
    ok(&["train", "--config", p(&cfg), "--seed", "11", "--out", p(&b)]);
    assert_eq!(read_json(&b.join("config.json"))["seed"], 11);
    assert_ne!(fs::read(a.join("train_log.jsonl")).unwrap(), fs::read(b.join("train_log.jsonl")).unwrap());
}

#[test]
fn finetune_without_steps_keeps_full_consistency() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), json!({}));
    let run = dir.path().join("run");
    ok(&["train", "--config", p(&cfg), "--out", p(&run)]);
    let ft = dir.path().join("ft");
    let ckpt = run.join("checkpoint");
    ok(&["finetune", "--config", p(&cfg), "--checkpoint", p(&ckpt), "--out", p(&ft)]);
    let rc = jsonl(&ft.join("rc_log.jsonl"));
    assert_eq!(rc.len(), 1);
    assert_eq!((rc[0]["step"].as_u64(), rc[0]["rc"].as_f64()), (Some(0), Some(1.0)));
    assert!(read_json(&ft.join("probe.json"))["probes"].as_array().unwrap().len() == 6);

    let an = dir.path().join("an");
    let rc_log = ft.join("rc_log.jsonl");
    ok(&["analyze", "--config", p(&cfg), "--checkpoint", p(&ckpt), "--rc-log", p(&rc_log), "--out", p(&an)]);
    let lines = jsonl(&an.join("analysis.jsonl"));
    let kinds: Vec<&str> = lines.iter().map(|l| l["kind"].as_str().unwrap()).collect();
    assert_eq!(kinds[0], "rc");
    assert_eq!(kinds.iter().filter(|k| **k == "separation").count(), 4);
    assert_eq!(kinds.iter().filter(|k| **k == "usage").count(), 2);
}

#[test]
fn ablate_resolves_dense_and_standard_moe() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), json!({"ablate": {"variants": ["dense", "standard-moe"]}}));
    let out = dir.path().join("ablate");
    ok(&["ablate", "--config", p(&cfg), "--out", p(&out)]);
    let manifest = read_json(&out.join("dense").join("checkpoint").join("manifest.json"));
    assert_eq!(manifest["config"]["experts_total"], 1);
    assert_eq!(manifest["config"]["top_k"], 1);
    for l in jsonl(&out.join("standard-moe").join("train_log.jsonl")) {
        assert_eq!(l["l_total"], l["l_task"]);
    }
    let rows = read_json(&out.join("ablation.json"));
    assert_eq!(rows.as_array().unwrap().len(), 2);
    assert_eq!(fs::read_to_string(out.join("ablation.tsv")).unwrap().lines().count(), 3);
}

#[test]
fn learned_regime_predictor_feeds_training() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), json!({}));
    let reg = dir.path().join("reg");
    ok(&["train-regime", "--config", p(&cfg), "--out", p(&reg)]);
    assert!(read_json(&reg.join("regime.json")).get("learned").is_some());
    let cfg = write_config(
        dir.path(),
        json!({"regime": {"source": "learned", "predictor": "reg/regime.json"}}),
    );
    let run = dir.path().join("run");
    ok(&["train", "--config", p(&cfg), "--out", p(&run)]);
    assert_eq!(jsonl(&run.join("train_log.jsonl")).len(), 5);
}
