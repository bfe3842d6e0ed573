use std::fs;
use std::process::Command;

const SMALL: &str = r#"
[chain]
L = 4
n = 2
delta = 5.6
J = 2.2
zeta = 3.5

[integration]
t_transient = 2.0
t_window = 2.0
n_traj = 4
master_seed = 1
"#;

fn twachain(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_twachain")).args(args).output().unwrap()
}

#[test]
fn simulate_writes_artifacts_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("small.toml");
    fs::write(&cfg, SMALL).unwrap();
    let out = dir.path().join("run");
    let o = twachain(&["simulate", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--seed", "5", "--threads", "2"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let line = String::from_utf8(o.stdout).unwrap();
    assert!(line.starts_with("simulate: L=4"), "{line}");
    for f in ["sites.csv", "config.resolved.toml", "wigner_site1.csv", "thermo.csv", "summary.json"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let resolved = fs::read_to_string(out.join("config.resolved.toml")).unwrap();
    assert!(resolved.contains("master_seed = 5"));

    let fit = dir.path().join("fit");
    let o = twachain(&[
        "fit-thermo",
        "--config",
        out.join("config.resolved.toml").to_str().unwrap(),
        "--out",
        fit.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(fit.join("thermo.csv").exists());
}

#[test]
fn errors_are_json() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, SMALL.replace("L = 4", "L = 0")).unwrap();
    let o = twachain(&["simulate", "--config", cfg.to_str().unwrap(), "--out", dir.path().join("x").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let err: serde_json::Value = serde_json::from_slice(&o.stderr).unwrap();
    assert_eq!(err["stage"], "validate");
    assert_eq!(err["code"], "Validation");
    assert!(err["message"].as_str().unwrap().contains("L must be positive"), "{err}");
    assert_eq!(err["context"]["command"], "simulate");
    assert!(!dir.path().join("x").exists());

    let o = twachain(&["otoc", "--config", dir.path().join("missing.toml").to_str().unwrap()]);
    let err: serde_json::Value = serde_json::from_slice(&o.stderr).unwrap();
    assert_eq!(err["code"], "ConfigParse");
}

#[test]
fn gp_reports_phase_variance() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("gp.toml");
    fs::write(&cfg, SMALL).unwrap();
    let out = dir.path().join("gp");
    let o = twachain(&["gp", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success());
    let table = fs::read_to_string(out.join("gp.csv")).unwrap();
    assert_eq!(table.lines().count(), 5);
    assert!(table.starts_with("site,abs_alpha2,C1,C2,C3,dphi1"));
}
