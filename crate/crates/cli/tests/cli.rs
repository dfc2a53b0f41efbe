use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn trilink(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_trilink")).args(args).output().expect("run trilink")
}

fn write(dir: &TempDir, name: &str, body: &str) -> PathBuf {
    let p = dir.path().join(name);
    std::fs::write(&p, body).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const ASYM_KINEMATIC: &str = r#"{
  "model": {"actuation": "kinematic", "wheels": "no_skid"},
  "gait": {"preset": "asymmetric_kinematic", "omega_rad_s": 4.0},
  "params": {"table": "table1"},
  "cycles": 3
}"#;

const SKID_KINEMATIC: &str = r#"{
  "model": {"actuation": "kinematic", "wheels": "viscous_skid", "roll_dissipation": true},
  "gait": {"preset": "asymmetric_kinematic"},
  "params": {"table": "table1"}
}"#;

#[test]
fn simulate_writes_trajectory_and_metrics() {
    let dir = TempDir::new().unwrap();
    let cfg = write(&dir, "run.json", ASYM_KINEMATIC);
    let out = dir.path().join("traj.csv");
    let o = trilink(&["simulate", "--config", s(&cfg), "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let traj = std::fs::read_to_string(&out).unwrap();
    assert!(traj.starts_with("t,x,y,theta,phi1,phi2,xdot,ydot,thetadot,phi1dot,phi2dot,lambda1"));
    let metrics = std::fs::read_to_string(dir.path().join("traj.csv.metrics.csv")).unwrap();
    let mut lines = metrics.lines();
    assert_eq!(lines.next().unwrap(), "run,cycle,t0_s,tp_s,d_mm,vbar_mm_s,dtheta_deg,theta_slope_deg_s,sigma0,sigma1,sigma2,alpha1_deg");
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 3);
    let d: f64 = rows[0].split(',').nth(4).unwrap().parse().unwrap();
    assert!((d - 122.4).abs() < 0.1, "{d}");
}

#[test]
fn simulate_is_deterministic() {
    let dir = TempDir::new().unwrap();
    let cfg = write(
        &dir,
        "run.json",
        &SKID_KINEMATIC.replace(r#""asymmetric_kinematic""#, r#""asymmetric_kinematic", "omega_rad_s": 3.0"#)
            .replace(r#""table1"}"#, r#""table1"}, "duration_s": 2.0"#),
    );
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    for out in [&a, &b] {
        let o = trilink(&["simulate", "--config", s(&cfg), "--out", s(out)]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn negative_mass_is_rejected_by_name() {
    let dir = TempDir::new().unwrap();
    let cfg = write(&dir, "bad.json", &ASYM_KINEMATIC.replace(r#""table": "table1""#, r#""table": "table1", "m0_kg": -1.0"#));
    let out = dir.path().join("traj.csv");
    let o = trilink(&["simulate", "--config", s(&cfg), "--out", s(&out)]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("m0"), "{}", stderr(&o));
    assert!(!out.exists());
}

#[test]
fn singular_kinematic_run_fails_without_output() {
    let dir = TempDir::new().unwrap();
    let cfg = write(&dir, "sym.json", &ASYM_KINEMATIC.replace("asymmetric_kinematic", "symmetric_kinematic"));
    let out = dir.path().join("traj.csv");
    let o = trilink(&["simulate", "--config", s(&cfg), "--out", s(&out)]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("singular"), "{}", stderr(&o));
    assert!(!out.exists());
    assert!(!dir.path().join("traj.csv.metrics.csv").exists());
}

#[test]
fn unknown_config_field_is_rejected() {
    let dir = TempDir::new().unwrap();
    let cfg = write(&dir, "typo.json", &ASYM_KINEMATIC.replace("\"cycles\"", "\"cycels\""));
    let o = trilink(&["simulate", "--config", s(&cfg), "--out", s(&dir.path().join("t.csv"))]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("cycels"), "{}", stderr(&o));
}

#[test]
fn sweep_writes_one_row_per_frequency() {
    let dir = TempDir::new().unwrap();
    let cfg = write(&dir, "skid.json", SKID_KINEMATIC);
    let out = dir.path().join("sweep.csv");
    let o = trilink(&["sweep", "--config", s(&cfg), "--omegas", "1:1:4", "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = std::fs::read_to_string(&out).unwrap();
    let mut lines = text.lines();
    assert!(lines.next().unwrap().starts_with("omega,d_mm,vbar_mm_s"));
    let omegas: Vec<f64> = lines.map(|l| l.split(',').next().unwrap().parse().unwrap()).collect();
    assert_eq!(omegas, vec![1.0, 2.0, 3.0, 4.0]);
}

#[test]
fn fit_reports_non_increasing_objective() {
    let dir = TempDir::new().unwrap();
    let cfg = write(&dir, "skid.json", SKID_KINEMATIC);
    let records = write(
        &dir,
        "records.csv",
        "omega,d_mm,vbar_mm_s,sigma0,sigma1,sigma2,alpha1_deg\n1.0,110.0,17.5,0.02,0.05,0.05,\n3.0,100.0,47.7,0.03,0.07,0.07,\n",
    );
    let out = dir.path().join("fit.json");
    let o = trilink(&[
        "fit", "--config", s(&cfg), "--records", s(&records), "--free", "cS0,cS1", "--max-evals", "20", "--out", s(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert!(report["evaluations"].as_u64().unwrap() <= 20);
    let history: Vec<f64> = report["j_history"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
    assert!(!history.is_empty());
    assert!(history.windows(2).all(|w| w[1] <= w[0]), "{history:?}");
    assert_eq!(report["fitted"].as_array().unwrap().len(), 2);
    assert_eq!(report["per_record"].as_array().unwrap().len(), 2);
}

#[test]
fn analyze_reads_simulated_trace() {
    let dir = TempDir::new().unwrap();
    let cfg = write(&dir, "run.json", ASYM_KINEMATIC);
    let trace = dir.path().join("trace.csv");
    let o = trilink(&["simulate", "--config", s(&cfg), "--out", s(&trace)]);
    assert!(o.status.success(), "{}", stderr(&o));
    write(&dir, "trace.json", r#"{"gait": {"preset": "asymmetric_kinematic", "omega_rad_s": 4.0}}"#);
    let out = dir.path().join("cycles.csv");
    let o = trilink(&["analyze", "--trace", s(&trace), "--window", "3", "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = std::fs::read_to_string(&out).unwrap();
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(rows.len(), 3);
    assert!(rows.iter().all(|r| r.starts_with("trace,")));
    let d: f64 = rows[0].split(',').nth(4).unwrap().parse().unwrap();
    assert!((d - 122.4).abs() < 1.0, "{d}");
}

#[test]
fn params_lists_presets() {
    let o = trilink(&["params", "--table", "table2"]);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("k_tau") && text.contains("0.188"));
    let o = trilink(&["params", "--table", "table9"]);
    assert!(!o.status.success());
}
