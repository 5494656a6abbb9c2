use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const SMALL: &str = r#"
[cycle]
kind = "random"
steps = 640

[mixed]
latent_dim = 2
epochs = 40
subset_size = 1

[baseline]
max_order = 2
"#;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_switchdetect"))
}

fn config(dir: &Path, extra: &str) -> PathBuf {
    let path = dir.join("run.toml");
    std::fs::write(&path, format!("{SMALL}\n{extra}")).unwrap();
    path
}

fn run(cfg: &Path, out: &Path, args: &[&str]) -> Output {
    bin()
        .arg("--config")
        .arg(cfg)
        .arg("--out")
        .arg(out)
        .args(args)
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn manifest(out: &Path, cmd: &str) -> Value {
    let text = std::fs::read_to_string(out.join(format!("manifest_{cmd}.json"))).unwrap();
    serde_json::from_str(&text).unwrap()
}

#[test]
fn full_pipeline_writes_artifacts_and_report() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path(), "");
    let out = tmp.path().join("out");
    for cmd in ["doe", "dmdc", "nodyn", "baseline", "mixed"] {
        let o = run(&cfg, &out, &[cmd]);
        assert_eq!(code(&o), 0, "{cmd}: {}", String::from_utf8_lossy(&o.stderr));
        let m = manifest(&out, cmd);
        assert_eq!(m["command"], cmd);
        assert_eq!(m["defaults_version"], 1);
        assert_eq!(m["config_hash"].as_str().unwrap().len(), 64);
        assert!(m["steps"].as_array().unwrap().iter().all(|s| s["status"] == "ok"));
        for f in m["outputs"].as_array().unwrap() {
            assert!(out.join(f.as_str().unwrap()).is_file());
        }
    }
    let first = run(&cfg, &out, &["report"]);
    assert_eq!(code(&first), 0);
    let text = String::from_utf8(first.stdout.clone()).unwrap();
    for section in ["== DMDc ==", "== MixED-DMD ==", "== NoDyn", "== Baselines =="] {
        assert!(text.contains(section), "missing {section}");
    }
    assert!(!text.contains("Missing artifacts"));
    assert_eq!(std::fs::read_to_string(out.join("report.txt")).unwrap(), text);
    let second = run(&cfg, &out, &["report"]);
    assert_eq!(first.stdout, second.stdout);
}

#[test]
fn report_lists_missing_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path(), "");
    let out = tmp.path().join("out");
    assert_eq!(code(&run(&cfg, &out, &["dmdc"])), 0);
    let o = bin().arg("report").arg(&out).output().unwrap();
    assert_eq!(code(&o), 0);
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("Spectral radius"));
    assert!(text.contains("Missing artifacts: mixed.json, nodyn.json, baseline.json"));
}

#[test]
fn simulation_is_deterministic_per_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path(), "");
    let (a, b, c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));
    assert_eq!(code(&run(&cfg, &a, &["--seed", "7", "simulate"])), 0);
    assert_eq!(code(&run(&cfg, &b, &["--seed", "7", "simulate"])), 0);
    assert_eq!(code(&run(&cfg, &c, &["--seed", "8", "simulate"])), 0);
    for f in ["t0.csv", "t1.csv", "t0_doe.csv", "t1_codoe.csv", "schedule.csv"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    assert_ne!(std::fs::read(a.join("schedule.csv")).unwrap(), std::fs::read(c.join("schedule.csv")).unwrap());
    assert_eq!(manifest(&a, "simulate")["seed"], 7);
}

#[test]
fn written_tables_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path(), "");
    let out = tmp.path().join("out");
    assert_eq!(code(&run(&cfg, &out, &["simulate", "--tables", "t0,t0-doe"])), 0);
    assert!(!out.join("t1.csv").exists());
    for f in ["t0.csv", "t0_doe.csv"] {
        let table = switchdetect::DataTable::load(&out.join(f)).unwrap();
        assert_eq!(table.nrows(), 640);
        let again = tmp.path().join(format!("again_{f}"));
        table.save(&again).unwrap();
        assert_eq!(switchdetect::DataTable::load(&again).unwrap(), table);
    }
}

#[test]
fn complemented_run_flips_every_flag() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path(), "");
    let out = tmp.path().join("out");
    assert_eq!(code(&run(&cfg, &out, &["simulate", "--tables", "t0-doe,t1-codoe"])), 0);
    let doe = switchdetect::DataTable::load(&out.join("t0_doe.csv")).unwrap();
    let co = switchdetect::DataTable::load(&out.join("t1_codoe.csv")).unwrap();
    for name in ["X_Battery", "X_Motor", "X_Driveline", "X_Glider"] {
        let (x, y) = (doe.column(name).unwrap(), co.column(name).unwrap());
        assert!(x.iter().zip(y).all(|(a, b)| a + b == 1.0), "{name}");
    }
}

#[test]
fn exit_codes_follow_failure_class() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");

    let cfg = config(tmp.path(), "[nodyn]\nalpha = 0.1\nunknown = 1\n");
    assert_eq!(code(&run(&cfg, &out, &["doe"])), 2);

    let cfg = config(tmp.path(), "[mixed.weights]\np_eps = -1.0\n");
    assert_eq!(code(&run(&cfg, &out, &["doe"])), 2);

    let cfg = tmp.path().join("cycle.toml");
    std::fs::write(&cfg, "[cycle]\nkind = \"csv\"\npath = \"absent.csv\"\n").unwrap();
    assert_eq!(code(&run(&cfg, &out, &["doe"])), 2);

    let cfg = config(tmp.path(), "[dmdc]\nprune_threshold = 1.5\n");
    assert_eq!(code(&run(&cfg, &out, &["dmdc"])), 2);

    // Keeping every correlated state leaves the reference fit rank deficient.
    let cfg = config(tmp.path(), "[dmdc]\nprune_threshold = 1.0\n");
    let o = run(&cfg, &out, &["dmdc"]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
    let m = manifest(&out, "dmdc");
    let last = m["steps"].as_array().unwrap().last().unwrap().clone();
    assert_eq!(last["name"], "fit_dmdc");
    assert!(last["status"].as_str().unwrap().starts_with("failed"));

    let o = bin().arg("report").arg(tmp.path().join("nowhere")).output().unwrap();
    assert_eq!(code(&o), 4);

    let blocker = tmp.path().join("file");
    std::fs::write(&blocker, "").unwrap();
    let cfg = config(tmp.path(), "");
    assert_eq!(code(&run(&cfg, &blocker.join("sub"), &["doe"])), 4);
}

#[test]
fn no_perturbations_retain_nothing() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("null.toml");
    std::fs::write(&cfg, format!("perturbations = []\n{SMALL}")).unwrap();
    let out = tmp.path().join("out");
    assert_eq!(code(&run(&cfg, &out, &["nodyn"])), 0);
    let summary: Value = serde_json::from_str(&std::fs::read_to_string(out.join("nodyn.json")).unwrap()).unwrap();
    assert_eq!(summary["retained"], serde_json::json!([]));
    assert!(manifest(&out, "nodyn")["config"]["perturbations"].as_array().unwrap().is_empty());
}
