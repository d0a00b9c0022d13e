//! End-to-end runs of the `malk` binary on small configs.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use malora::cli::{
    encode, layer_checkpoint, load_checkpoint, restore_layer, CHECKPOINT_FILE, METRICS_FILE, SEED_ENV, TIMINGS_FILE,
};
use serde_json::{json, Value};
use tempfile::TempDir;

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn malk(args: &[&str], seed_env: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_malk"));
    cmd.args(args).env_remove(SEED_ENV);
    if let Some(s) = seed_env {
        cmd.env(SEED_ENV, s);
    }
    cmd.output().expect("spawn malk")
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "malk failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn train(config: &Path, dir: &Path, seed_env: Option<&str>) {
    ok(&malk(&["train", config.to_str().unwrap(), "--out", dir.to_str().unwrap()], seed_env));
}

fn write_config(dir: &Path, value: &Value) -> PathBuf {
    let path = dir.join("config.json");
    fs::write(&path, serde_json::to_vec_pretty(value).unwrap()).unwrap();
    path
}

fn tiny_config(adapter: Value) -> Value {
    json!({
        "adapter": adapter,
        "training": { "lr": 0.01, "batch_size": 8, "epochs": 1 },
        "data": {
            "world": { "in_dim": 24, "out_dim": 20, "seed": 3 },
            "family": { "kind": "regression", "count": 2, "val_samples": 16, "seed": 2 },
            "train_samples": 64
        },
        "seed": 4
    })
}

#[test]
fn smoke_training_is_byte_identical_across_runs() {
    let (a, b) = (TempDir::new().unwrap(), TempDir::new().unwrap());
    let config = configs_dir().join("smoke.json");
    train(&config, a.path(), None);
    train(&config, b.path(), None);
    for file in [CHECKPOINT_FILE, METRICS_FILE] {
        let (x, y) = (fs::read(a.path().join(file)).unwrap(), fs::read(b.path().join(file)).unwrap());
        assert!(!x.is_empty());
        assert!(x == y, "{file} differs between identical runs");
    }
    assert!(a.path().join(TIMINGS_FILE).exists());
}

#[test]
fn seed_environment_variable_overrides_config() {
    let (a, b) = (TempDir::new().unwrap(), TempDir::new().unwrap());
    let config = configs_dir().join("smoke.json");
    train(&config, a.path(), None);
    train(&config, b.path(), Some("7"));
    let (x, y) = (
        load_checkpoint(&a.path().join(CHECKPOINT_FILE)).unwrap(),
        load_checkpoint(&b.path().join(CHECKPOINT_FILE)).unwrap(),
    );
    assert_eq!(x.metadata["seed"], 1);
    assert_eq!(y.metadata["seed"], 7);
    assert_ne!(x.tensor("s_a").unwrap(), y.tensor("s_a").unwrap());
}

#[test]
fn malformed_config_exits_2_without_outputs() {
    let tmp = TempDir::new().unwrap();
    let mut cfg = tiny_config(json!({ "method": "lora", "r": 2 }));
    cfg["training"]["learning_rate"] = json!(0.1);
    let path = write_config(tmp.path(), &cfg);
    let out_dir = tmp.path().join("run");
    let out = malk(&["train", path.to_str().unwrap(), "--out", out_dir.to_str().unwrap()], None);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate"));
    assert!(!out_dir.exists() || fs::read_dir(&out_dir).unwrap().next().is_none());

    let out = malk(&["budget", "/nonexistent/config.json"], None);
    assert_ne!(out.status.code(), Some(0));
    let out = malk(&["train"], None);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn checkpoint_round_trips_through_restore() {
    let tmp = TempDir::new().unwrap();
    let path =
        write_config(tmp.path(), &tiny_config(json!({ "method": "malora", "r": 2, "n_experts": 4, "lambda": 0.5 })));
    train(&path, tmp.path(), None);
    let file = tmp.path().join(CHECKPOINT_FILE);
    let bytes = fs::read(&file).unwrap();
    let ckpt = load_checkpoint(&file).unwrap();
    let (config, layer) = restore_layer(&ckpt).unwrap();
    assert_eq!(encode(&layer_checkpoint(&config, &layer)).unwrap(), bytes);

    let eval: Value = serde_json::from_str(&ok(&malk(&["eval", file.to_str().unwrap()], None))).unwrap();
    assert_eq!(eval["per_task"].as_array().unwrap().len(), 2);
}

#[test]
fn cca_on_frozen_shared_down_projections_is_one() {
    let tmp = TempDir::new().unwrap();
    let adapter = json!({ "method": "moasylora", "r": 2, "n_experts": 4, "shared_init_a": true });
    let path = write_config(tmp.path(), &tiny_config(adapter));
    train(&path, tmp.path(), None);
    let ckpt = tmp.path().join(CHECKPOINT_FILE);
    ok(&malk(&["analyze", "cca", ckpt.to_str().unwrap()], None));
    let report: Value = serde_json::from_slice(&fs::read(tmp.path().join("cca.json")).unwrap()).unwrap();
    let mean = report["a_side"]["mean"].as_f64().unwrap();
    assert!((mean - 1.0).abs() < 1e-12, "A-side mean {mean}");
    assert!(tmp.path().join("cca.csv").exists());
}

#[test]
fn spectrum_of_malora_a_side_has_rank_d() {
    let tmp = TempDir::new().unwrap();
    let path =
        write_config(tmp.path(), &tiny_config(json!({ "method": "malora", "r": 2, "n_experts": 4, "lambda": 0.5 })));
    train(&path, tmp.path(), None);
    let ckpt = tmp.path().join(CHECKPOINT_FILE);
    let out_dir = tmp.path().join("analysis");
    ok(&malk(&["analyze", "spectrum", ckpt.to_str().unwrap(), "--out", out_dir.to_str().unwrap()], None));
    let pair: Value = serde_json::from_slice(&fs::read(out_dir.join("spectrum.json")).unwrap()).unwrap();
    // d = round(0.5 · 2 · 4) = 4
    assert_eq!(pair["a_side"]["numerical_rank"], 4);

    ok(&malk(
        &["analyze", "beta-probe", ckpt.to_str().unwrap(), "--betas", "1,2", "--out", out_dir.to_str().unwrap()],
        None,
    ));
    let rows: Value = serde_json::from_slice(&fs::read(out_dir.join("beta_probe.json")).unwrap()).unwrap();
    let (p1, p2) = (rows[0]["grad_p_norm"].as_f64().unwrap(), rows[1]["grad_p_norm"].as_f64().unwrap());
    assert!((p2 / p1 - 2.0).abs() < 1e-9);
}

#[test]
fn budget_json_reports_every_row() {
    let out = ok(&malk(&["budget", configs_dir().join("malora.json").to_str().unwrap(), "--json"], None));
    let report: Value = serde_json::from_str(&out).unwrap();
    let rows = report["rows"].as_array().unwrap();
    assert!(rows.len() >= 2);
    assert!(rows.iter().all(|r| r["budget"]["trainable"].as_u64().unwrap() > 0));
}

#[test]
fn bench_emits_phase_table_for_each_method() {
    let tmp = TempDir::new().unwrap();
    let csv = tmp.path().join("bench.csv");
    let config = write_config(
        tmp.path(),
        &json!({
            "adapter": { "method": "malora", "r": 2, "n_experts": 4, "lambda": 0.5 },
            "bench": { "in_dim": 32, "out_dim": 32, "batch": 8 }
        }),
    );
    let stdout = ok(&malk(&["bench", config.to_str().unwrap(), "--reps", "10", "--out", csv.to_str().unwrap()], None));
    assert!(stdout.contains("malora/molora total ratio"));
    let table = fs::read_to_string(&csv).unwrap();
    let mut lines = table.lines();
    assert_eq!(lines.next(), Some("method,forward_s,backward_s,optimize_s,total_s,flops"));
    let methods: Vec<&str> = lines.map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(methods, ["lora", "molora", "malora"]);
}
