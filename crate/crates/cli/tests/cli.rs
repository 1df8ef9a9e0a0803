use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn lapfmm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lapfmm"))
        .args(args)
        .env_remove("FMM_NUM_THREADS")
        .output()
        .expect("binary runs")
}

fn json(out: &Output) -> Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("report is JSON")
}

fn generate(dir: &Path, name: &str, dist: &str, n: usize, seed: u64) -> String {
    let path = dir.join(name);
    let out = lapfmm(&[
        "generate",
        "--distribution",
        dist,
        "--n",
        &n.to_string(),
        "--seed",
        &seed.to_string(),
        "--out",
        path.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    path.to_str().unwrap().to_string()
}

#[test]
fn generate_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = generate(dir.path(), "a.bin", "sphere-surface", 8, 1);
    let b = generate(dir.path(), "b.bin", "sphere-surface", 8, 1);
    let c = generate(dir.path(), "c.bin", "sphere-surface", 8, 2);
    let (a, b, c) = (std::fs::read(a).unwrap(), std::fs::read(b).unwrap(), std::fs::read(c).unwrap());
    assert_eq!(a.len(), 8 + 8 * 32);
    assert_eq!(u64::from_le_bytes(a[..8].try_into().unwrap()), 8);
    assert_eq!(a, b);
    assert_ne!(a, c);
    // unit charges by default
    let charges: Vec<f64> = a[8 + 8 * 24..]
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
        .collect();
    assert!(charges.iter().all(|&q| q == 1.0));
}

#[test]
fn single_leaf_run_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let input = generate(dir.path(), "p.bin", "uniform-cube", 60, 3);
    let report = json(&lapfmm(&["run", "--input", &input, "--n-crit", "100", "--p", "3", "--verify"]));
    assert_eq!(report["leaves"], 1);
    assert!(report["relative_error"].as_f64().unwrap() <= 1e-13);
    for list in ["u", "v", "w", "x"] {
        assert!(report["lists"][list]["mean"].is_number(), "{list}");
    }
    let ops = report["timings"]["per_operator"].as_array().unwrap();
    assert_eq!(ops.len(), 8);
    assert!(ops.iter().all(|o| o["seconds"].as_f64().unwrap() >= 0.0));
}

#[test]
fn run_without_verify_has_no_error_field() {
    let dir = tempfile::tempdir().unwrap();
    let input = generate(dir.path(), "p.bin", "sphere-surface", 500, 4);
    let phi = dir.path().join("phi.bin");
    let report = json(&lapfmm(&[
        "run",
        "--input",
        &input,
        "--n-crit",
        "20",
        "--p",
        "4",
        "--potentials",
        phi.to_str().unwrap(),
    ]));
    assert!(report.get("relative_error").is_none());
    assert_eq!(std::fs::metadata(&phi).unwrap().len(), 8 + 500 * 8);
}

#[test]
fn error_decreases_with_p() {
    let dir = tempfile::tempdir().unwrap();
    let input = generate(dir.path(), "p.bin", "sphere-surface", 2000, 5);
    let err = |p: &str| {
        let r = json(&lapfmm(&["run", "--input", &input, "--n-crit", "30", "--p", p, "--verify"]));
        r["relative_error"].as_f64().unwrap()
    };
    let (e2, e4, e6) = (err("2"), err("4"), err("6"));
    assert!(e4 < e2 && e6 < e4, "{e2} {e4} {e6}");
}

#[test]
fn verify_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let input = generate(dir.path(), "p.bin", "two-cluster", 1500, 6);
    let ok = lapfmm(&["verify", "--input", &input, "--n-crit", "20", "--p", "6", "--tolerance", "1e-5"]);
    assert_eq!(ok.status.code(), Some(0), "{}", String::from_utf8_lossy(&ok.stderr));
    let strict = lapfmm(&["verify", "--input", &input, "--n-crit", "20", "--p", "2", "--tolerance", "1e-12"]);
    assert_eq!(strict.status.code(), Some(3));
}

#[test]
fn usage_and_data_errors() {
    assert_eq!(lapfmm(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(lapfmm(&["--help"]).status.code(), Some(0));
    assert_eq!(lapfmm(&["generate", "--n", "0", "--out", "/tmp/x"]).status.code(), Some(1));
    assert_eq!(
        lapfmm(&["generate", "--distribution", "torus", "--n", "3", "--out", "/tmp/x"]).status.code(),
        Some(1)
    );

    let dir = tempfile::tempdir().unwrap();
    let input = generate(dir.path(), "p.bin", "uniform-cube", 10, 1);
    assert_eq!(lapfmm(&["run", "--input", &input, "--p", "1"]).status.code(), Some(1));
    assert_eq!(
        lapfmm(&["run", "--input", &input, "--alpha-inner", "3", "--alpha-outer", "2"]).status.code(),
        Some(1)
    );
    let missing = dir.path().join("missing.bin");
    assert_eq!(lapfmm(&["run", "--input", missing.to_str().unwrap()]).status.code(), Some(2));
    let bad = dir.path().join("bad.bin");
    std::fs::write(&bad, [1u8, 0, 0, 0, 0, 0, 0, 0, 9]).unwrap();
    assert_eq!(lapfmm(&["stats", "--input", bad.to_str().unwrap()]).status.code(), Some(2));
}

#[test]
fn precompute_then_run_uses_cache() {
    let dir = tempfile::tempdir().unwrap();
    let input = generate(dir.path(), "p.bin", "sphere-surface", 400, 7);
    let cache = dir.path().join("ops.cache");
    let cache = cache.to_str().unwrap();
    let pre = json(&lapfmm(&["precompute", "--input", &input, "--p", "3", "--cache", cache]));
    assert_eq!(pre["m2l_matrices"], 316);
    assert_eq!(pre["n_equivalent"], 26);
    let before = std::fs::read(cache).unwrap();
    let run = json(&lapfmm(&["run", "--input", &input, "--p", "3", "--n-crit", "20", "--cache", cache, "--verify"]));
    assert!(run["relative_error"].as_f64().unwrap() < 1e-2);
    assert_eq!(std::fs::read(cache).unwrap(), before);
    // a different order rebuilds and overwrites
    json(&lapfmm(&["run", "--input", &input, "--p", "4", "--n-crit", "20", "--cache", cache]));
    assert_ne!(std::fs::read(cache).unwrap(), before);
}

#[test]
fn stats_report_and_uniform_w() {
    let dir = tempfile::tempdir().unwrap();
    let input = generate(dir.path(), "p.bin", "two-cluster", 3000, 8);
    let r = json(&lapfmm(&["stats", "--input", &input, "--n-crit", "25"]));
    assert_eq!(r["n"], 3000);
    assert!(r["leaves"].as_u64().unwrap() > 1);
    assert!(r["lists"]["u"]["max"].as_u64().unwrap() <= 60);
    assert!(r["lists"]["v"]["max"].as_u64().unwrap() <= 189);
    assert!(r["lists"]["w"]["max"].as_u64().unwrap() <= 148);
    assert!(r["lists"]["x"]["max"].as_u64().unwrap() <= 19);
    assert!(r["lists"]["w"]["mean"].as_f64().unwrap() > 0.0);
}

#[test]
fn config_file_and_flag_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let input = generate(dir.path(), "p.bin", "uniform-cube", 300, 9);
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"p": 3, "n_crit": 40, "l2p_cache_local": false, "threads": 2}"#).unwrap();
    let cfg = cfg.to_str().unwrap();
    let r = json(&lapfmm(&["run", "--input", &input, "--config", cfg]));
    assert_eq!(r["config"]["p"], 3);
    assert_eq!(r["config"]["n_crit"], 40);
    assert_eq!(r["config"]["l2p_cache_local"], false);
    assert_eq!(r["config"]["threads"], 2);
    let r = json(&lapfmm(&["run", "--input", &input, "--config", cfg, "--p", "4", "--l2p-cache-local"]));
    assert_eq!(r["config"]["p"], 4);
    assert_eq!(r["config"]["l2p_cache_local"], true);

    let with_env = Command::new(env!("CARGO_BIN_EXE_lapfmm"))
        .args(["run", "--input", &input, "--p", "3"])
        .env("FMM_NUM_THREADS", "3")
        .output()
        .unwrap();
    assert_eq!(json(&with_env)["config"]["threads"], 3);
    let flag_wins = Command::new(env!("CARGO_BIN_EXE_lapfmm"))
        .args(["run", "--input", &input, "--p", "3", "--threads", "1"])
        .env("FMM_NUM_THREADS", "3")
        .output()
        .unwrap();
    assert_eq!(json(&flag_wins)["config"]["threads"], 1);
    let bad_env = Command::new(env!("CARGO_BIN_EXE_lapfmm"))
        .args(["run", "--input", &input])
        .env("FMM_NUM_THREADS", "many")
        .output()
        .unwrap();
    assert_eq!(bad_env.status.code(), Some(1));
    let unknown = dir.path().join("unknown.json");
    std::fs::write(&unknown, r#"{"q": 3}"#).unwrap();
    assert_eq!(lapfmm(&["run", "--input", &input, "--config", unknown.to_str().unwrap()]).status.code(), Some(1));
}

#[test]
fn deterministic_with_one_thread() {
    let dir = tempfile::tempdir().unwrap();
    let input = generate(dir.path(), "p.bin", "sphere-surface", 800, 10);
    let phi = |name: &str, threads: &str| {
        let path = dir.path().join(name);
        json(&lapfmm(&[
            "run", "--input", &input, "--p", "4", "--n-crit", "25", "--threads", threads, "--potentials",
            path.to_str().unwrap(),
        ]));
        std::fs::read(path).unwrap()
    };
    let a = phi("a", "1");
    assert_eq!(a, phi("b", "1"));
    assert_eq!(a, phi("c", "4"));
}

#[test]
fn bench_table() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("bench.json");
    let status = lapfmm(&[
        "bench", "--sizes", "1000,2000", "--repeats", "2", "--p", "3", "--n-crit", "50", "--direct-max", "2000",
        "--out", out.to_str().unwrap(),
    ]);
    assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
    let r: Value = serde_json::from_slice(&std::fs::read(out).unwrap()).unwrap();
    let rows = r["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 2);
    for row in rows {
        assert!(row["total"]["mean"].as_f64().unwrap() > 0.0);
        assert!(row["total"]["std"].as_f64().unwrap() >= 0.0);
        assert!(row["direct"]["mean"].as_f64().unwrap() > 0.0);
        assert_eq!(row["per_operator"].as_array().unwrap().len(), 8);
    }
    assert!(r["fmm_slope"].is_number() && r["direct_slope"].is_number());
    assert_eq!(lapfmm(&["bench", "--sizes", "2000,1000"]).status.code(), Some(1));
}
