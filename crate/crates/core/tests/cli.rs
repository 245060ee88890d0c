use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn verigin(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_verigin"))
        .args(args)
        .arg("--out")
        .arg(out)
        .env_remove("VERIGIN_OUT")
        .output()
        .unwrap()
}

fn json(path: PathBuf) -> Value {
    serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap()
}

#[test]
fn malformed_config_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(config("stable_reference.toml"))
        .unwrap()
        .replace("gamma = 1.0", "gamma = 1.0\ngravity = 9.81");
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, text).unwrap();
    let out = dir.path().join("out");
    let o = verigin(&["equilibrium", "--config", bad.to_str().unwrap()], &out);
    assert!(!o.status.success());
    let err = json(out.join("error.json"));
    assert_eq!(err["kind"], "ConfigError");
    assert!(err["message"].as_str().unwrap().contains("gravity"));
    let stderr: Value = serde_json::from_slice(&o.stderr).unwrap();
    assert_eq!(stderr, err);
}

#[test]
fn invalid_value_is_rejected_with_its_path() {
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(config("stable_reference.toml"))
        .unwrap()
        .replace("k = 0.7", "k = -0.7");
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, text).unwrap();
    let o = verigin(&["eos-check", "--config", bad.to_str().unwrap()], &dir.path().join("out"));
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("eos.upper.k"));
}

#[test]
fn unstable_reference_is_hyperbolic_with_threshold_reported() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config("unstable_reference.toml");
    let cfg = cfg.to_str().unwrap();
    assert!(verigin(&["equilibrium", "--config", cfg], dir.path()).status.success());
    assert!(verigin(&["stability", "--config", cfg], dir.path()).status.success());
    let eq = json(dir.path().join("equilibrium.json"));
    let st = json(dir.path().join("stability.json"));
    let report = &st["report"];
    assert_eq!(report["classification"], "NormallyHyperbolic");
    let sigma_star = report["sigma_star"].as_f64().unwrap();
    // σ* = γ[[ρ*]]/μ₁ with μ₁ = π² on the unit interval.
    let jump = eq["jump_rho"].as_f64().unwrap();
    assert!((sigma_star - jump / std::f64::consts::PI.powi(2)).abs() < 1e-12 * sigma_star);
    assert!(report["sigma"].as_f64().unwrap() < sigma_star);
    assert_eq!(st["linops_unstable_count"], report["morse_index"]);
    assert_eq!(st["crossing_count"], report["morse_index"]);
    let profile = std::fs::read_to_string(dir.path().join("profile.csv")).unwrap();
    assert!(profile.starts_with("phase,y,p,rho\n"));
}

#[test]
fn verify_passes_on_stable_reference() {
    let dir = tempfile::tempdir().unwrap();
    let o = verigin(&["verify", "--config", config("stable_reference.toml").to_str().unwrap()], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report = json(dir.path().join("verify_report.json"));
    assert_eq!(report["all_passed"], true);
    for c in report["checks"].as_array().unwrap() {
        assert_eq!(c["passed"], true, "{c}");
    }
    assert!(!dir.path().join("error.json").exists());
}

#[test]
fn sweep_writes_one_directory_per_value() {
    let dir = tempfile::tempdir().unwrap();
    let o = verigin(
        &[
            "stability",
            "--config",
            config("stable_reference.toml").to_str().unwrap(),
            "--sweep",
            "sigma=0.02:0.1:3",
        ],
        dir.path(),
    );
    assert!(o.status.success());
    let csv = std::fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
    let morse: Vec<i64> = (0..3)
        .map(|i| json(dir.path().join(format!("sweep_{i:03}/stability.json")))["report"]["morse_index"].as_i64().unwrap())
        .collect();
    // σ* ≈ 0.0669 for this system, so only σ = 0.1 is stable.
    assert_eq!(morse, vec![1, 1, 0]);
}

#[test]
fn case_override_switches_to_phase_transition() {
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(config("stable_reference.toml"))
        .unwrap()
        .replace("masses = [0.45, 1.0]", "masses = [0.45, 1.0]\ntotal = 1.5");
    let cfg = dir.path().join("ii.toml");
    std::fs::write(&cfg, text).unwrap();
    let out = dir.path().join("out");
    let o = verigin(&["equilibrium", "--config", cfg.to_str().unwrap(), "--case", "ii"], &out);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let eq = json(out.join("equilibrium.json"));
    assert_eq!(eq["case"], "ii");
    let m = eq["masses"].as_array().unwrap();
    let total = m[0].as_f64().unwrap() + m[1].as_f64().unwrap();
    assert!((total - 1.5).abs() < 1e-9);
}

#[test]
fn case_override_without_total_uses_the_phase_mass_sum() {
    // Total 1.45 puts the coexistence interface above the lid, so the solve must fail cleanly.
    let dir = tempfile::tempdir().unwrap();
    let o = verigin(
        &["equilibrium", "--config", config("stable_reference.toml").to_str().unwrap(), "--case", "ii"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(2));
    let err = json(dir.path().join("error.json"));
    assert_eq!(err["kind"], "FeasibilityError");
    assert!(err["message"].as_str().unwrap().contains("interface height"));
}

#[test]
fn out_dir_falls_back_to_environment() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_verigin"))
        .args(["eos-check", "--config", config("stable_reference.toml").to_str().unwrap()])
        .env("VERIGIN_OUT", dir.path())
        .output()
        .unwrap();
    assert!(o.status.success());
    assert!(dir.path().join("eos_check.json").exists());
}
