use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::atomic::{AtomicUsize, Ordering};

use serde_json::Value;

fn scratch(tag: &str) -> PathBuf {
    static N: AtomicUsize = AtomicUsize::new(0);
    let dir = std::env::temp_dir().join(format!(
        "mvsteady-cli-{}-{tag}-{}",
        std::process::id(),
        N.fetch_add(1, Ordering::Relaxed)
    ));
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn mvsteady(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mvsteady"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("run.toml");
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_slice(&fs::read(path).unwrap()).unwrap()
}

fn positive_roots(v: &Value) -> usize {
    v["runs"]
        .as_array()
        .unwrap()
        .iter()
        .flat_map(|r| r["roots"].as_array().unwrap())
        .filter(|r| r["positive"].as_bool().unwrap())
        .count()
}

const SMALL_HKB: &str = "[discretization]\nmodes_per_axis = 16\nquadrature_points = 100\n";

fn steady(dir: &Path, preset: &str, extra: &str) -> Output {
    let cfg = write_config(dir, &format!("{SMALL_HKB}{extra}"));
    mvsteady(&["steady-states", "--preset", preset, "--config", &cfg, "--out", dir.to_str().unwrap()])
}

#[test]
fn hkb_root_counts() {
    for (preset, want) in [("hkb-k1", 1), ("hkb-k3", 3)] {
        let dir = scratch(preset);
        let out = steady(&dir, preset, "");
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        let v = read_json(&dir.join("steadystates.json"));
        assert_eq!(positive_roots(&v), want, "{preset}");
        let report = fs::read_to_string(dir.join("report.txt")).unwrap();
        assert!(report.contains("beta_inv = 1"));
        for r in v["runs"][0]["roots"].as_array().unwrap() {
            assert!(r["residual_norm"].as_f64().unwrap() < 1e-9);
            assert!(dir.join(r["density_file"].as_str().unwrap()).exists());
        }
        fs::remove_dir_all(dir).ok();
    }
}

#[test]
fn identical_seeds_give_identical_bytes() {
    let dir = scratch("seed");
    let run = |seed: &str| {
        let cfg = write_config(&dir, "[discretization]\nmodes_per_axis = 10\nquadrature_points = 66\n");
        let out = mvsteady(&[
            "steady-states",
            "--preset",
            "hkb-asym-k2",
            "--config",
            &cfg,
            "--seed",
            seed,
            "--out",
            dir.to_str().unwrap(),
        ]);
        assert!(code(&out) == 0 || code(&out) == 2);
        fs::read(dir.join("steadystates.json")).unwrap()
    };
    let a = run("7");
    assert_eq!(a, run("7"));
    assert_ne!(a, run("8"));
    fs::remove_dir_all(&dir).ok();
    let text = String::from_utf8(a).unwrap();
    assert!(text.contains("\"seed\": 7"));
    assert!(text.contains("\"schema_version\": 1"));
}

#[test]
fn config_errors_exit_one() {
    let dir = scratch("bad");
    let empty = write_config(&dir, "");
    let out = mvsteady(&["steady-states", "--config", &empty]);
    assert_eq!(code(&out), 1);

    let bad = write_config(&dir, "[model]\nname = \"hkb\"\n[discretization]\nmodes_per_axis = \"many\"\nbeta_inv = 1.0\n");
    let out = mvsteady(&["steady-states", "--config", &bad, "--out", dir.to_str().unwrap()]);
    assert_eq!(code(&out), 1);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("modes_per_axis") && err.contains("line 4"), "{err}");

    let out = mvsteady(&["steady-states", "--preset", "no-such-preset"]);
    assert_eq!(code(&out), 1);

    let unknown_model = write_config(&dir, "[model]\nname = \"ising\"\n[discretization]\nmodes_per_axis = 4\nbeta_inv = 1.0\n");
    let out = mvsteady(&["steady-states", "--config", &unknown_model, "--out", dir.to_str().unwrap()]);
    assert_eq!(code(&out), 1);
    fs::remove_dir_all(dir).ok();
}

#[test]
fn no_roots_exit_two() {
    let dir = scratch("none");
    let out = steady(&dir, "hkb-k3", "[newton]\nmax_iter = 1\n");
    assert_eq!(code(&out), 2);
    assert_eq!(positive_roots(&read_json(&dir.join("steadystates.json"))), 0);
    fs::remove_dir_all(dir).ok();
}

#[test]
fn verify_passes_then_catches_corruption() {
    let dir = scratch("verify");
    assert_eq!(code(&steady(&dir, "hkb-k3", "")), 0);
    let cfg = dir.join("run.toml");
    let args = |input: &Path| {
        mvsteady(&[
            "verify",
            "--preset",
            "hkb-k3",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            dir.to_str().unwrap(),
            "--input",
            input.to_str().unwrap(),
        ])
    };
    let good = dir.join("steadystates.json");
    let out = args(&good);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stdout));
    let rows = read_json(&dir.join("verify.json"))["rows"].as_array().unwrap().clone();
    assert_eq!(rows.len(), 3);
    for r in &rows {
        assert!(r["order_gap"].as_f64().unwrap() <= 1e-3);
    }

    let mut v = read_json(&good);
    let c = &mut v["runs"][0]["roots"][1]["coefficients"][3];
    *c = Value::from(c.as_f64().unwrap() + 1e-3);
    let bad = dir.join("corrupt.json");
    fs::write(&bad, serde_json::to_vec(&v).unwrap()).unwrap();
    let out = args(&bad);
    assert_eq!(code(&out), 3);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert_eq!(stdout.matches("FAIL").count(), 1, "{stdout}");

    assert_eq!(code(&args(&dir.join("missing.json"))), 1);
    fs::remove_dir_all(dir).ok();
}

fn trajectory_column(path: &Path, name: &str) -> Vec<f64> {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines().filter(|l| !l.starts_with('#'));
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let col = header.iter().position(|h| *h == name).unwrap();
    lines
        .map(|l| l.split(',').nth(col).unwrap().parse().unwrap())
        .collect()
}

#[test]
fn evolving_a_steady_state_stays_put() {
    let dir = scratch("evolve");
    let extra = "[evolve]\nspan = 1.0\ndt = 0.01\nsnapshot_stride = 50\n\
                 start = { kind = \"steady-state\", index = 1 }\n\
                 reference = { kind = \"steady-state\", index = 1 }\n";
    assert_eq!(code(&steady(&dir, "hkb-k3", extra)), 0);
    let out = mvsteady(&[
        "evolve",
        "--preset",
        "hkb-k3",
        "--config",
        dir.join("run.toml").to_str().unwrap(),
        "--out",
        dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let traj = dir.join("trajectory.csv");
    let d = trajectory_column(&traj, "distance");
    assert_eq!(d.len(), 101);
    assert!(d.iter().all(|x| *x < 1e-8), "{d:?}");
    let mass = trajectory_column(&traj, "mass");
    assert!(mass.iter().all(|m| (m - 1.0).abs() < 1e-12));
    let head = fs::read_to_string(&traj).unwrap();
    assert!(head.starts_with("# schema_version 1\n# config {"));
    assert!(dir.join("density_0002.csv").exists());
    fs::remove_dir_all(dir).ok();
}

#[test]
fn blow_up_exits_three_and_keeps_last_state() {
    let dir = scratch("blowup");
    let cfg = write_config(
        &dir,
        "[model]\nname = \"hkb\"\nparams = { alpha = -1.0, kappa = 1.0 }\n\
         [discretization]\nmodes_per_axis = 16\nbeta_inv = 1.0\n\
         [evolve]\nspan = 100.0\ndt = 1.0\nsnapshot_stride = 1000\n\
         start = { kind = \"fourier\", terms = [{ k = [3], amplitude = 0.5 }] }\n",
    );
    let out = mvsteady(&["evolve", "--config", &cfg, "--out", dir.to_str().unwrap()]);
    assert_eq!(code(&out), 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("blew up"));
    // first snapshot plus the last good state
    assert!(dir.join("density_0001.csv").exists());
    assert!(fs::read_to_string(dir.join("report.txt")).unwrap().contains("blew up"));
    fs::remove_dir_all(dir).ok();
}

#[test]
fn stabilizing_a_stable_state_costs_nothing() {
    let dir = scratch("stab");
    let extra = "[control]\ngamma = 0.01\nterminal_weight = 10.0\nwindow = 0.5\nspan = 1.0\n\
                 n_steps = 4\ndt = 0.01\nmax_iter = 5\n\
                 start = { kind = \"steady-state\", index = 0 }\n\
                 target = { kind = \"steady-state\", stability = \"stable\" }\n";
    assert_eq!(code(&steady(&dir, "hkb-k1", extra)), 0);
    let out = mvsteady(&[
        "stabilize",
        "--preset",
        "hkb-k1",
        "--config",
        dir.join("run.toml").to_str().unwrap(),
        "--out",
        dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let norms = trajectory_column(&dir.join("trajectory.csv"), "control_norm");
    assert!(norms[..4].iter().all(|u| *u < 1e-8), "{norms:?}");
    let controls = fs::read_to_string(dir.join("controls.csv")).unwrap();
    assert_eq!(controls.lines().filter(|l| !l.starts_with('#')).count(), 1 + 4);
    fs::remove_dir_all(dir).ok();
}

#[test]
fn unresolved_target_exits_one() {
    let dir = scratch("target");
    let extra = "[control]\ngamma = 0.01\nterminal_weight = 10.0\nwindow = 0.5\nspan = 1.0\n\
                 n_steps = 4\ndt = 0.05\n\
                 start = { kind = \"uniform\" }\n\
                 target = { kind = \"steady-state\", peaks = 7 }\n";
    assert_eq!(code(&steady(&dir, "hkb-k3", extra)), 0);
    let out = mvsteady(&[
        "stabilize",
        "--preset",
        "hkb-k3",
        "--config",
        dir.join("run.toml").to_str().unwrap(),
        "--out",
        dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("matches 0"));
    fs::remove_dir_all(dir).ok();
}

#[test]
fn presets_are_listed_and_printable() {
    let out = mvsteady(&["presets"]);
    assert_eq!(code(&out), 0);
    let list = String::from_utf8_lossy(&out.stdout);
    for name in ["hkb-k1", "hkb-k3", "hkb-asym-k2", "hkb-asym-k4", "hkb-asym-k5", "o2-sweep", "hk", "von-mises"] {
        assert!(list.lines().any(|l| l.starts_with(name)), "{name}");
    }
    let out = mvsteady(&["presets", "o2-sweep"]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("eta_field = 0.05"));
}
