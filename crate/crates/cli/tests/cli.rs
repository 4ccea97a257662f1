use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn okf(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_okf"))
        .args(args)
        .env("OKF_OUT_DIR", dir.join("out"))
        .current_dir(dir)
        .output()
        .expect("run okf")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = okf(dir, args);
    assert!(
        out.status.success(),
        "okf {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn json(path: &Path) -> Value {
    serde_json::from_slice(&fs::read(path).unwrap()).unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn matrix(v: &Value) -> Vec<Vec<f64>> {
    serde_json::from_value(v.clone()).unwrap()
}

#[test]
fn simulate_writes_reproducible_datasets() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(d, &["simulate", "--benchmark", "Toy", "--targets", "100", "--seed", "1", "--out", "a.json"]);
    ok(d, &["simulate", "--benchmark", "Toy", "--targets", "100", "--seed", "1", "--out", "b.json"]);
    let a = fs::read(d.join("a.json")).unwrap();
    assert_eq!(a, fs::read(d.join("b.json")).unwrap());
    assert_eq!(json(&d.join("a.json"))["targets"].as_array().unwrap().len(), 100);

    // Default location comes from the output-root variable.
    let stdout = ok(d, &["simulate", "--benchmark", "Toy", "--targets", "3"]);
    assert!(stdout.contains("3 targets"));
    assert!(d.join("out").join("Toy-n3-s1.json").exists());
}

#[test]
fn unknown_benchmark_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = okf(tmp.path(), &["simulate", "--benchmark", "Nope", "--targets", "3"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Nope"));
    let out = okf(tmp.path(), &["--jobs", "0", "simulate", "--benchmark", "Toy"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn estimate_recovers_linear_noise() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let cfg = write(
        d,
        "lin.toml",
        "version = 1\nvariant = \"LKF\"\nout_dir = \"est\"\n[data]\nbenchmark = \"Linear\"\ntargets = 500\nseed = 4\n",
    );
    ok(d, &["estimate", "--config", cfg.to_str().unwrap()]);
    let p = json(&d.join("est/params.json"));
    assert_eq!(p["name"], "LKF");
    assert_eq!(p["metadata"]["mode"], "estimate");
    assert_eq!(p["metadata"]["config"]["data"]["seed"], 4);
    let r = matrix(&p["r"]);
    for (i, row) in r.iter().enumerate() {
        assert!((row[i] - 1e4).abs() / 1e4 < 0.03, "R[{i}][{i}] = {}", row[i]);
    }
    let q = matrix(&p["q"]);
    for (i, want) in [25.0, 25.0, 25.0, 4.0, 4.0, 4.0].iter().enumerate() {
        assert!((q[i][i] - want).abs() / want < 0.05, "Q[{i}][{i}] = {}", q[i][i]);
    }
}

#[test]
fn tune_without_epochs_returns_the_estimate() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let data = "[data]\nbenchmark = \"Toy\"\ntargets = 60\nseed = 2\n";
    let est = write(d, "est.toml", &format!("version = 1\nvariant = \"KF\"\nout_dir = \"est\"\n{data}"));
    let tun = write(
        d,
        "tune.toml",
        &format!("version = 1\nvariant = \"KF\"\nout_dir = \"tune\"\n{data}[train]\nepochs = 0\n"),
    );
    ok(d, &["estimate", "--config", est.to_str().unwrap()]);
    ok(d, &["tune", "--config", tun.to_str().unwrap()]);
    let e = json(&d.join("est/params.json"));
    let t = json(&d.join("tune/params.json"));
    assert_eq!(e["q"], t["q"]);
    assert_eq!(e["r"], t["r"]);
    assert_eq!(t["name"], "OKF");
    assert_eq!(t["metadata"]["best_step"], 0);
    let curve = fs::read_to_string(d.join("tune/curve.csv")).unwrap();
    assert!(curve.starts_with("step,lr,train_loss,val_mse,val_nll\n"));
}

#[test]
fn oracle_needs_polar_noise() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let toy = write(
        d,
        "toy.toml",
        "version = 1\nvariant = \"KFp\"\nmode = \"oracle\"\n[data]\nbenchmark = \"Toy\"\ntargets = 20\n",
    );
    let out = okf(d, &["estimate", "--config", toy.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));

    let close = write(
        d,
        "close.toml",
        "version = 1\nvariant = \"KFp\"\nmode = \"oracle\"\nout_dir = \"oracle\"\n[data]\nbenchmark = \"Close\"\ntargets = 20\n",
    );
    ok(d, &["estimate", "--config", close.to_str().unwrap()]);
    let p = json(&d.join("oracle/params.json"));
    assert_eq!(p["name"], "KFp-oracle");
    let r = matrix(&p["r"]);
    assert_eq!(r[0][0], 2500.0);
    assert_eq!(r[3][3], 25.0);
}

#[test]
fn eval_compares_and_refuses_mixed_training_sets() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(d, &["simulate", "--benchmark", "Toy", "--targets", "200", "--seed", "77", "--out", "test.json"]);
    let data = "[data]\nbenchmark = \"Toy\"\ntargets = 300\nseed = 5\n";
    let est = write(d, "est.toml", &format!("version = 1\nvariant = \"KF\"\nout_dir = \"kf\"\n{data}"));
    let tun = write(
        d,
        "tune.toml",
        &format!("version = 1\nvariant = \"KF\"\nout_dir = \"okf\"\n{data}[train]\nepochs = 5\n"),
    );
    ok(d, &["estimate", "--config", est.to_str().unwrap()]);
    ok(d, &["tune", "--config", tun.to_str().unwrap()]);

    // Identical parameters give a zero paired statistic.
    ok(d, &["eval", "--models", "kf/params.json", "kf/params.json", "--dataset", "test.json", "--out", "same"]);
    let same = json(&d.join("same/report.json"));
    assert_eq!(same["comparisons"][0]["z"], 0.0);
    assert_eq!(same["models"][1]["name"], "KF#2");

    let stdout = ok(d, &["eval", "--models", "kf/params.json", "okf/params.json", "--dataset", "test.json", "--out", "rep"]);
    assert!(stdout.contains("KF vs OKF"));
    let rep = json(&d.join("rep/report.json"));
    let kf = rep["models"][0]["mse"].as_f64().unwrap();
    let okf_mse = rep["models"][1]["mse"].as_f64().unwrap();
    assert!(okf_mse < kf, "OKF {okf_mse} vs KF {kf}");
    assert!(rep["comparisons"][0]["z"].as_f64().unwrap() > 0.0);
    for f in ["report.csv", "comparisons.csv", "rmse_ratio.dat"] {
        assert!(d.join("rep").join(f).exists(), "{f}");
    }

    let stdout = ok(d, &["compare", "--report", "rep", "--baseline", "OKF"]);
    assert!(stdout.contains("OKF vs KF"));

    let other = write(
        d,
        "other.toml",
        "version = 1\nvariant = \"KF\"\nout_dir = \"other\"\n[data]\nbenchmark = \"Toy\"\ntargets = 50\nseed = 9\n",
    );
    ok(d, &["estimate", "--config", other.to_str().unwrap()]);
    let out = okf(d, &["eval", "--models", "kf/params.json", "other/params.json", "--dataset", "test.json"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("different dataset"));
}

#[test]
fn missing_files_fail() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let out = okf(d, &["eval", "--models", "nope.json", "--dataset", "nothing.json"]);
    assert!(!out.status.success());
    let out = okf(d, &["estimate", "--config", "absent.toml"]);
    assert_eq!(out.status.code(), Some(2));
    let out = okf(d, &["compare", "--report", "no-such-dir"]);
    assert!(!out.status.success());
}

fn track_setup(d: &Path) {
    ok(d, &["simulate", "--benchmark", "Toy", "--targets", "40", "--seed", "3", "--out", "data.json"]);
    let cfg = write(
        d,
        "est.toml",
        "version = 1\nvariant = \"KF\"\nout_dir = \"kf\"\n[data]\ndataset = \"data.json\"\n",
    );
    ok(d, &["estimate", "--config", cfg.to_str().unwrap()]);
}

#[test]
fn single_target_episode_is_pure() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    track_setup(d);
    write(d, "one.toml", "version = 1\ntargets = 1\n");
    ok(d, &["track", "--dataset", "data.json", "--params", "kf/params.json", "--episode-config", "one.toml", "--out", "t"]);
    let s = json(&d.join("t/purity.json"));
    assert_eq!(s["mean_purity"], 1.0);
    assert_eq!(s["trackers_created"], 1);
}

#[test]
fn episodes_are_deterministic_and_log_deletions() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    track_setup(d);
    write(d, "ep.toml", "version = 1\ntargets = 4\nstagger = 15\nseed = 2\n");
    let args = |out: &'static str| {
        vec!["track", "--dataset", "data.json", "--params", "kf/params.json", "--episode-config", "ep.toml", "--out", out]
    };
    ok(d, &args("a"));
    ok(d, &args("b"));
    let log = fs::read_to_string(d.join("a/episode.jsonl")).unwrap();
    assert_eq!(log, fs::read_to_string(d.join("b/episode.jsonl")).unwrap());

    // Staggered targets end before the episode does; their trackers age out.
    let steps: Vec<Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    let deleted: Vec<(usize, u64)> = steps
        .iter()
        .flat_map(|s| {
            let step = s["step"].as_u64().unwrap() as usize;
            s["deletions"].as_array().unwrap().iter().map(move |id| (step, id.as_u64().unwrap()))
        })
        .collect();
    assert!(!deleted.is_empty());
    for (step, id) in deleted {
        // The tracker was present, unmatched, in the preceding frames.
        let last_seen = steps[..step]
            .iter()
            .rposition(|s| s["assignments"].as_array().unwrap().iter().chain(s["spawns"].as_array().unwrap()).any(|a| a[0].as_u64() == Some(id)))
            .expect("tracker was matched at some point");
        assert_eq!(step - last_seen, 3, "tracker {id} deleted at {step}, last matched at {last_seen}");
    }
}
