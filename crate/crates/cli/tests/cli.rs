use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mpq_cli::RunConfig;
use serde_json::Value;

fn tiny_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    let h = &mut cfg.harness;
    h.train_size = 24;
    h.eval_size = 16;
    h.pool_size = 32;
    h.detector.pfn_width = 8;
    h.detector.stage_widths = [8, 8];
    h.detector.stage_depth = [1, 1];
    h.detector.neck_width = 8;
    h.detector.neck_depth = 1;
    h.pretrain.epochs = 2;
    cfg.pipeline.k = 1;
    cfg.calib_sweep.sizes = vec![2, 8];
    cfg.calib_sweep.seeds = vec![0, 1];
    cfg
}

struct Env {
    _dir: tempfile::TempDir,
    config: PathBuf,
    root: PathBuf,
}

fn env() -> Env {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("config.json");
    fs::write(&config, serde_json::to_string_pretty(&tiny_config()).unwrap()).unwrap();
    Env {
        root: dir.path().to_path_buf(),
        config,
        _dir: dir,
    }
}

fn mpq(env: &Env, out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mpq"))
        .arg("--config")
        .arg(&env.config)
        .arg("--out")
        .arg(out)
        .args(args)
        .output()
        .unwrap()
}

fn ok(o: Output) -> Output {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    o
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

/// Every report and table in `dir`; timing sidecars excluded.
fn outputs(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| !p.to_string_lossy().ends_with(".meta.json"))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

#[test]
fn gen_data_writes_configured_count_and_is_reproducible() {
    let env = env();
    let a = env.root.join("a");
    let b = env.root.join("b");
    ok(mpq(&env, &a, &["gen-data", "--split", "eval"]));
    ok(mpq(&env, &b, &["gen-data", "--split", "eval"]));
    let lines = fs::read_to_string(a.join("eval.jsonl")).unwrap().lines().count();
    assert_eq!(lines, tiny_config().harness.eval_size);
    assert_eq!(outputs(&a), outputs(&b));
    let manifest = json(&a.join("eval.manifest.json"));
    assert_eq!(manifest["scenes"], 16);
    let report = json(&a.join("gen-data.json"));
    assert_eq!(report["config"]["harness"]["eval_size"], 16);
    assert!(a.join("gen-data.meta.json").exists());
}

#[test]
fn invalid_outlier_rate_is_a_usage_error() {
    let env = env();
    let o = mpq(&env, &env.root.join("x"), &["gen-data", "--outlier-rate", "1.5"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("outlier_rate"));
}

#[test]
fn seed_flag_changes_data_and_is_recorded() {
    let env = env();
    let a = env.root.join("a");
    let b = env.root.join("b");
    ok(mpq(&env, &a, &["--seed", "1", "gen-data", "--split", "train"]));
    ok(mpq(&env, &b, &["--seed", "2", "gen-data", "--split", "train"]));
    assert_ne!(fs::read(a.join("train.jsonl")).unwrap(), fs::read(b.join("train.jsonl")).unwrap());
    assert_eq!(json(&a.join("gen-data.json"))["seed"], 1);
    assert_eq!(json(&b.join("gen-data.json"))["config"]["harness"]["data_seed"], 2);
}

#[test]
fn latency_fixture_rows() {
    let env = env();
    let out = env.root.join("lat");
    ok(mpq(&env, &out, &["latency", "--device", "rtx_4070ti", "--plan", "FP32", "--plan", "FP16: 1"]));
    let rows = json(&out.join("latency.json"))["result"].clone();
    let measured = rows[1]["measured_speedup"].as_f64().unwrap();
    assert!((measured - 2.538).abs() < 1e-3, "{measured}");
    // FP32 everywhere: column sum plus the fitted constant
    let fp32 = &rows[0]["estimate"];
    let per_layer: f64 = fp32["per_layer"].as_array().unwrap().iter().map(|c| c["ms"].as_f64().unwrap()).sum();
    let e2e = fp32["end_to_end_ms"].as_f64().unwrap();
    assert!((per_layer + fp32["constant_ms"].as_f64().unwrap() - e2e).abs() < 1e-9);
    assert_eq!(fp32["boundaries"], 0);
    let csv = fs::read_to_string(out.join("latency.csv")).unwrap();
    assert!(csv.starts_with("plan,end_to_end_ms,speedup,measured_ms,measured_speedup\n"));
}

#[test]
fn unknown_device_lists_fixtures() {
    let env = env();
    let o = mpq(&env, &env.root.join("x"), &["latency", "--device", "abacus"]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("jetson_orin") && err.contains("rtx_4070ti"), "{err}");
}

#[test]
fn missing_model_fails_with_io_error() {
    let env = env();
    let o = mpq(&env, &env.root.join("x"), &["eval", "--model", "/nonexistent/model"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn bad_plan_is_a_usage_error() {
    let env = env();
    let o = mpq(&env, &env.root.join("x"), &["latency", "--plan", "FP16: x"]);
    assert_eq!(o.status.code(), Some(2));
}

/// Runs every model stage into `out`.
fn full_run(env: &Env, out: &Path) {
    ok(mpq(env, out, &["gen-data"]));
    let data = out.to_str().unwrap();
    ok(mpq(env, out, &["--data", data, "train"]));
    ok(mpq(env, out, &["--data", data, "calibrate", "--n", "4", "--calib-seed", "1"]));
    ok(mpq(env, out, &["--data", data, "sweep", "--calib-seeds", "0,1"]));
    ok(mpq(env, out, &["plan", "--k", "2"]));
    let stats = out.join("calib-stats.json");
    ok(mpq(env, out, &["--data", data, "eval", "--plan", "INT8", "--stats", stats.to_str().unwrap()]));
    ok(mpq(env, out, &["--data", data, "qat", "--plan", "FP16: 1"]));
    ok(mpq(env, out, &["--data", data, "calib-sweep", "--sampling", "nested"]));
    ok(mpq(env, out, &["--data", data, "pipeline", "--qat"]));
}

#[test]
fn every_stage_is_byte_identical_on_rerun() {
    let env = env();
    let a = env.root.join("a");
    let b = env.root.join("b");
    full_run(&env, &a);
    full_run(&env, &b);
    let (fa, fb) = (outputs(&a), outputs(&b));
    assert_eq!(fa.iter().map(|f| &f.0).collect::<Vec<_>>(), fb.iter().map(|f| &f.0).collect::<Vec<_>>());
    for (x, y) in fa.iter().zip(&fb) {
        assert!(x.1 == y.1, "{} differs between reruns", x.0);
    }
    for name in [
        "model.mpq.json",
        "model.mpq.bin",
        "calib-stats.json",
        "sweep.json",
        "sweep.csv",
        "plan.json",
        "eval.json",
        "qat.json",
        "qat_model.mpq.json",
        "calib_sweep.csv",
        "calib_sweep.json",
        "pipeline.json",
        "pipeline.csv",
        "train_history.csv",
    ] {
        assert!(fa.iter().any(|f| f.0 == name), "missing {name}");
    }

    // k = 1: three baselines, one candidate, and QAT variants of INT8 and it
    let pipeline = json(&a.join("pipeline.json"));
    let rows = pipeline["result"]["rows"].as_array().unwrap();
    let labels: Vec<&str> = rows.iter().map(|r| r["label"].as_str().unwrap()).collect();
    assert_eq!(&labels[..3], ["FP32", "FP16", "INT8"]);
    assert!(labels[3].starts_with("FP16: "));
    assert_eq!(labels.len(), 6);
    assert!(labels[4..].iter().all(|l| l.starts_with("QAT ")));
    assert_eq!(pipeline["result"]["complete"], true);
    assert_eq!(pipeline["config"]["pipeline"]["k"], 1);
    let csv = fs::read_to_string(a.join("pipeline.csv")).unwrap();
    assert_eq!(csv.lines().count(), 7);

    // plan.json: greedy prefixes of the top-2
    let plan = json(&a.join("plan.json"));
    let cands = plan["result"]["candidates"].as_array().unwrap();
    assert_eq!(cands.len(), 2);
    let topk: Vec<u64> = plan["result"]["topk"].as_array().unwrap().iter().map(|v| v.as_u64().unwrap()).collect();
    assert_eq!(cands[0]["label"], format!("FP16: {}", topk[0]));

    // nested calibration: max observed never shrinks as n grows
    let sweep_csv = fs::read_to_string(a.join("calib_sweep.csv")).unwrap();
    let mut rows: Vec<(usize, u64, usize, f64)> = sweep_csv
        .lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[0].parse().unwrap(), f[1].parse().unwrap(), f[2].parse().unwrap(), f[3].parse().unwrap())
        })
        .collect();
    rows.sort_by_key(|r| (r.1, r.2, r.0));
    for w in rows.windows(2) {
        if (w[0].1, w[0].2) == (w[1].1, w[1].2) {
            assert!(w[1].3 >= w[0].3, "{w:?}");
        }
    }

    // the model written by train scores what train.json reports
    let train = json(&a.join("train.json"));
    assert_eq!(train["result"]["eval"]["map"], pipeline["result"]["rows"][0]["map"]);
}

#[test]
fn data_files_are_used_when_present() {
    let env = env();
    let a = env.root.join("a");
    ok(mpq(&env, &a, &["gen-data", "--split", "eval", "--size", "5"]));
    ok(mpq(&env, &a, &["--data", a.to_str().unwrap(), "train"]));
    let train = json(&a.join("train.json"));
    let entries = train["result"]["eval"]["entries"].as_array().unwrap();
    assert!(!entries.is_empty());
    // only the eval split came from disk; the regenerated train split matches
    let b = env.root.join("b");
    ok(mpq(&env, &b, &["train"]));
    let other = json(&b.join("train.json"));
    assert_eq!(train["result"]["weight_hash"], other["result"]["weight_hash"]);
}
