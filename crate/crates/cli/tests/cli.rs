use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn gradlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gradlab"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, name: &str, body: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, body).unwrap();
    p.to_str().unwrap().to_string()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap_or(-1)
}

#[test]
fn check_on_log_well_reports_margins() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(
        tmp.path(),
        "check.json",
        r#"{"command": "check", "d": 1, "q": 1,
            "potential": {"kind": "log_well", "a": 0.25, "beta": 0.005}}"#,
    );
    let out = tmp.path().join("out");
    let o = gradlab(&["check", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let r = read_json(&out.join("report.json"));
    let c = &r["conditions"];
    assert_eq!(c["a0_holds"], true);
    assert_eq!(c["a1_holds"], true);
    assert!(c["a2_margin"].as_f64().unwrap() > 0.0);
    assert!(c["a2_beta_threshold"].as_f64().unwrap() > 0.005);
    assert_eq!(r["bounds"]["asserted"], true);
    let m = read_json(&out.join("manifest.json"));
    assert_eq!(m["tool"], "gradlab");
    assert_eq!(m["config"]["tol"], 1e-10);
}

#[test]
fn rwr_on_quadratic_is_flat() {
    let tmp = TempDir::new().unwrap();
    let beta = 0.7;
    let cfg = write_config(
        tmp.path(),
        "rwr.json",
        r#"{"command": "rwr", "potential": {"kind": "quadratic", "k": 1, "beta": 0.7},
            "scan": {"d": 2, "grid": 3, "random": 10}}"#,
    );
    let out = tmp.path().join("out");
    let o = gradlab(&["rwr", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let r = read_json(&out.join("report.json"));
    for key in ["scanned_min", "scanned_max"] {
        let v = r[key].as_f64().unwrap();
        assert!((v - beta / 2.0).abs() < 1e-8, "{key} = {v}");
    }
    let csv = fs::read_to_string(out.join("scan.csv")).unwrap();
    assert!(csv.starts_with("s-2,s-1,s1,s2,i,j,minus_Dij\n"));
    assert_eq!(csv.lines().count(), 1 + (27 + 10) * 6);
}

#[test]
fn malformed_mixture_exits_one_with_key_path() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(
        tmp.path(),
        "bad.json",
        r#"{"command": "rwr", "potential": {"kind": "gaussian_mixture", "p": 1.5, "k1": 40, "k2": 1, "beta": 1},
            "scan": {"d": 1}}"#,
    );
    let o = gradlab(&["rwr", "--config", &cfg, "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("potential.p"), "{err}");
}

#[test]
fn unknown_keys_and_mismatches_exit_one() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path().to_str().unwrap();
    let cfg = write_config(
        tmp.path(),
        "typo.json",
        r#"{"command": "rwr", "potential": {"kind": "quadratic", "k": 1, "beta": 1},
            "scan": {"d": 1, "gird": 3}}"#,
    );
    let o = gradlab(&["rwr", "--config", &cfg, "--out", dir]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("scan"));

    let cfg = write_config(
        tmp.path(),
        "check.json",
        r#"{"command": "check", "d": 1, "potential": {"kind": "quadratic", "k": 1, "beta": 1}}"#,
    );
    assert_eq!(code(&gradlab(&["sigma", "--config", &cfg, "--out", dir])), 1);
    assert_eq!(code(&gradlab(&["check", "--out", dir])), 1);
    assert_eq!(code(&gradlab(&["check", "--config", &cfg, "--workers", "0", "--out", dir])), 1);
}

#[test]
fn failed_check_exits_three() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path().to_str().unwrap();
    let cfg = write_config(
        tmp.path(),
        "bk.json",
        r#"{"command": "bk", "bk": {"p": 0.2, "k1": 20, "k2": 1, "d": 1, "random": 4}}"#,
    );
    assert_eq!(code(&gradlab(&["bk", "--config", &cfg, "--out", dir])), 0);
    let o = gradlab(&["bk", "--config", &cfg, "--out", dir, "--tol", "1e-300"]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
}

/// Runs `cfg`, then reruns its manifest with one worker into a fresh
/// directory and compares every artifact byte for byte.
fn assert_manifest_rerun_is_identical(cmd: &str, body: &str) {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "cfg.json", body);
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    let o = gradlab(&[cmd, "--config", &cfg, "--out", a.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let manifest = a.join("manifest.json");
    let o = gradlab(&["run", "--config", manifest.to_str().unwrap(), "--workers", "1", "--out", b.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let (sa, sb) = (snapshot(&a), snapshot(&b));
    assert_eq!(sa.keys().collect::<Vec<_>>(), sb.keys().collect::<Vec<_>>());
    for (name, bytes) in &sa {
        assert!(bytes == &sb[name], "{cmd}: {name} differs");
    }
}

#[test]
fn sample_rerun_is_byte_identical() {
    assert_manifest_rerun_is_identical(
        "sample",
        r#"{"command": "sample", "seed": 11,
            "potential": {"kind": "log_well", "a": 0.25, "beta": 0.5},
            "geometry": {"kind": "torus", "d": 2, "n": 8},
            "sampler": {"sweeps": 60, "burn_in": 10, "thinning": 5, "tilt": [0.2, 0.0], "dump_every": 5}}"#,
    );
}

#[test]
fn decay_and_clt_reruns_are_byte_identical() {
    assert_manifest_rerun_is_identical(
        "decay",
        r#"{"command": "decay", "seed": 2,
            "potential": {"kind": "quadratic", "k": 1, "beta": 1},
            "geometry": {"kind": "torus", "d": 2, "n": 8},
            "sampler": {"sweeps": 300, "burn_in": 20},
            "decay": {"max_r": 4}}"#,
    );
    assert_manifest_rerun_is_identical(
        "clt",
        r#"{"command": "clt", "seed": 5,
            "potential": {"kind": "quadratic", "k": 1, "beta": 1},
            "geometry": {"kind": "torus", "d": 2, "n": 16},
            "sampler": {"sweeps": 200, "thinning": 2},
            "clt": {"f": {"profile": {"kind": "bump", "radius": 1.5}, "weights": [1.0, 0.5]}, "epsilons": [0.25]}}"#,
    );
}

#[test]
fn couple_sigma_rwr_reruns_are_byte_identical() {
    assert_manifest_rerun_is_identical(
        "couple",
        r#"{"command": "couple", "seed": 1,
            "potential": {"kind": "quadratic", "k": 1, "beta": 1},
            "geometry": {"kind": "box", "d": 1, "n": 8},
            "couple": {"coupling": {"steps": 200, "dt": 0.01, "seed": 0, "record_every": 10}}}"#,
    );
    assert_manifest_rerun_is_identical(
        "sigma",
        r#"{"command": "sigma", "d": 1,
            "potential": {"kind": "quadratic", "k": 1, "beta": 1},
            "sigma": {"n": 8, "s_grid": [-0.5, 0.0, 0.5]}}"#,
    );
    assert_manifest_rerun_is_identical(
        "rwr",
        r#"{"command": "rwr", "seed": 3,
            "potential": {"kind": "gaussian_mixture", "p": 0.1, "k1": 40, "k2": 1, "beta": 1},
            "scan": {"d": 1, "grid": 3, "random": 20}}"#,
    );
}

#[test]
fn seed_flag_overrides_config() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(
        tmp.path(),
        "cfg.json",
        r#"{"command": "sample", "seed": 1,
            "potential": {"kind": "quadratic", "k": 1, "beta": 1},
            "geometry": {"kind": "torus", "d": 1, "n": 8},
            "sampler": {"sweeps": 20}}"#,
    );
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    assert_eq!(code(&gradlab(&["sample", "--config", &cfg, "--out", a.to_str().unwrap()])), 0);
    assert_eq!(code(&gradlab(&["sample", "--config", &cfg, "--seed", "2", "--out", b.to_str().unwrap()])), 0);
    assert_eq!(read_json(&b.join("manifest.json"))["config"]["seed"], 2);
    assert_ne!(fs::read(a.join("series.csv")).unwrap(), fs::read(b.join("series.csv")).unwrap());
}
