use std::path::Path;
use std::process::{Command, Output};

fn cascade(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cascade"))
        .arg("--output")
        .arg(out)
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&cascade(dir.path(), &["--help"])), 0);
    assert_eq!(code(&cascade(dir.path(), &["--bogus"])), 1);
    assert_eq!(code(&cascade(dir.path(), &["--jobs", "0", "gen-data"])), 1);
    let o = cascade(dir.path(), &["fit", "--data", "/nonexistent/history.csv"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("/nonexistent/history.csv"));
    // models must be fitted first
    assert_eq!(code(&cascade(dir.path(), &["dispatch", "--benchmark"])), 2);
}

#[test]
fn bad_config_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[solver]\nepsilon = 1.5\n").unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_cascade"))
        .arg("--config")
        .arg(&cfg)
        .arg("--output")
        .arg(dir.path())
        .args(["dispatch", "--benchmark"])
        .output()
        .unwrap();
    assert_eq!(code(&o), 1);
}

#[test]
fn gen_data_fit_and_dispatch() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    assert_eq!(code(&cascade(out, &["gen-data"])), 0);
    let hist = std::fs::read_to_string(out.join("data/history.csv")).unwrap();
    assert!(hist.starts_with("timestamp,unit_id,inflow_m3s,release_m3s\n"));

    assert_eq!(code(&cascade(out, &["fit"])), 0);
    let report = json(&out.join("fit/fit_report.json"));
    assert!(report["r2"].as_f64().unwrap() > 0.8);
    assert!(out.join("models.json").exists());

    let o = cascade(out, &["dispatch", "--solver", "det", "--epsilon", "0.1"]);
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stderr).contains("--epsilon is ignored"));
    let cutlog = std::fs::read_to_string(out.join("dispatch/cutlog.csv")).unwrap();
    assert_eq!(
        cutlog,
        "step,iteration,lambda_star,probability,objective_mwh\n"
    );
    let rollout = std::fs::read_to_string(out.join("dispatch/rollout.csv")).unwrap();
    assert!(rollout
        .starts_with("step,unit,inflow_m3s,forecast_m3s,release_m3s,storage_m3,generation_mwh"));

    assert_eq!(code(&cascade(out, &["dispatch", "--benchmark"])), 0);
    let sol = json(&out.join("dispatch/solution.json"));
    assert!(sol["objective"].as_f64().unwrap() > 0.0);
    let cuts = std::fs::read_to_string(out.join("dispatch/cutlog.csv")).unwrap();
    assert!(cuts.lines().count() > 1);

    let m = json(&out.join("dispatch/manifest.json"));
    assert!(m["command"].as_str().unwrap().starts_with("dispatch"));
    assert_eq!(m["version"], env!("CARGO_PKG_VERSION"));
    assert!(m["models_sha256"].is_string());
    assert_eq!(m["config_sha256"].as_str().unwrap().len(), 64);
    for f in m["outputs"].as_array().unwrap() {
        assert!(out.join(f["path"].as_str().unwrap()).exists(), "{f}");
    }
}

#[test]
fn models_outside_the_output_are_refused() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let cfg = dir.path().join("c.toml");
    std::fs::write(
        &cfg,
        format!(
            "[paths]\nmodels = \"{}\"\n",
            dir.path().join("m.json").display()
        ),
    )
    .unwrap();
    assert_eq!(code(&cascade(&out, &["gen-data"])), 0);
    let o = Command::new(env!("CARGO_BIN_EXE_cascade"))
        .arg("--config")
        .arg(&cfg)
        .arg("--output")
        .arg(&out)
        .arg("fit")
        .output()
        .unwrap();
    assert_eq!(code(&o), 1);
    assert!(!dir.path().join("m.json").exists());
}
