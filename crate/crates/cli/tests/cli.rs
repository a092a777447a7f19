use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use podlab_core::pipeline::ProjectConfig;

fn shipped_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/default.toml")
}

fn podlab(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_podlab"))
        .args(args)
        .env("PODLAB_OUT", out)
        .output()
        .expect("podlab runs")
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn shipped_config_is_the_default() {
    let cfg: ProjectConfig = toml::from_str(&fs::read_to_string(shipped_config()).unwrap()).unwrap();
    assert_eq!(cfg, ProjectConfig::default());
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(podlab(&["plant", "explode"], dir.path()).status.code(), Some(2));
    assert_eq!(podlab(&["sim", "run", "--seed", "x"], dir.path()).status.code(), Some(2));
    assert_eq!(podlab(&[], dir.path()).status.code(), Some(2));
    assert_eq!(podlab(&["--help"], dir.path()).status.code(), Some(0));
}

#[test]
fn strict_config_rejects_unknown_keys() {
    let dir = tempfile::tempdir().unwrap();
    let text = fs::read_to_string(shipped_config()).unwrap().replace("[design]\n", "[design]\nwashout = 3.0\n");
    let path = dir.path().join("bad.toml");
    fs::write(&path, text).unwrap();
    let out = podlab(&["--config", path.to_str().unwrap(), "plant", "build"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("config:"));
}

#[test]
fn modes_above_channel_nyquist_limit_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let text = fs::read_to_string(shipped_config())
        .unwrap()
        .replace("freq_hz = 0.9\n", "freq_hz = 1.9\n")
        .replace("rate_hz = 3.5", "rate_hz = 3.2");
    let path = dir.path().join("fast_mode.toml");
    fs::write(&path, text).unwrap();
    let out = podlab(&["--config", path.to_str().unwrap(), "design", "run"], dir.path());
    let err = String::from_utf8_lossy(&out.stderr);
    assert_eq!(out.status.code(), Some(1), "{err}");
    assert!(err.contains("NY-LIMIT"), "{err}");
}

#[test]
fn ensemble_output_is_reproducible() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let cfg = shipped_config();
    for dir in [&a, &b] {
        let out = podlab(&["--config", cfg.to_str().unwrap(), "sim", "ensemble", "--seed", "7"], dir.path());
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let read = |d: &tempfile::TempDir| fs::read(d.path().join("ensemble.json")).unwrap();
    assert_eq!(read(&a), read(&b));
}

#[test]
fn full_pipeline_on_shipped_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = shipped_config();
    let c = cfg.to_str().unwrap();
    let steps: [&[&str]; 10] = [
        &["plant", "build"],
        &["channel", "measure"],
        &["channel", "fit"],
        &["sysid", "prbs"],
        &["sysid", "fit"],
        &["design", "run"],
        &["analyze", "bode"],
        &["analyze", "eig"],
        &["sim", "run"],
        &["sim", "ensemble"],
    ];
    for step in steps {
        let mut args = vec!["--config", c];
        args.extend_from_slice(step);
        let out = podlab(&args, dir.path());
        assert_eq!(out.status.code(), Some(0), "{step:?}: {}", String::from_utf8_lossy(&out.stderr));
    }

    let design = json(&dir.path().join("design.json"));
    for path in ["p", "q"] {
        for b in design["result"][path]["report"]["budgets"].as_array().unwrap() {
            let phi = b["phi_g_deg"].as_f64().unwrap();
            let wrapped = (phi + 180.0).rem_euclid(360.0) - 180.0;
            assert!(wrapped.abs() < 5.0, "{path}: {phi}");
        }
    }
    let ens = json(&dir.path().join("ensemble.json"));
    assert!(ens["result"]["median_ratio"].as_f64().unwrap() <= 0.5);
    assert_eq!(ens["seed"], 1);

    // Every artifact carries the config hash and the seed.
    let hash = design["config_hash"].as_str().unwrap().to_string();
    let mut n = 0;
    for entry in fs::read_dir(dir.path()).unwrap() {
        let path = entry.unwrap().path();
        let text = fs::read_to_string(&path).unwrap();
        if path.extension().is_some_and(|e| e == "csv") {
            let first = text.lines().next().unwrap();
            assert_eq!(first, format!("# podlab config_hash={hash} seed=1"), "{}", path.display());
        } else {
            let v: serde_json::Value = serde_json::from_str(&text).unwrap();
            assert_eq!(v["config_hash"], hash.as_str(), "{}", path.display());
            assert_eq!(v["seed"], 1, "{}", path.display());
        }
        n += 1;
    }
    assert!(n >= 20, "{n} files");

    // The fitted histogram can drive a later run.
    let text = fs::read_to_string(&cfg).unwrap().replace(
        "seed = 1\n",
        &format!("seed = 1\ndelay_histogram_file = \"{}\"\n", dir.path().join("delay_histogram.json").display()),
    );
    let with_hist = dir.path().join("with_histogram.toml");
    fs::write(&with_hist, text).unwrap();
    let out = podlab(&["--config", with_hist.to_str().unwrap(), "channel", "measure", "--messages", "2000"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
}
