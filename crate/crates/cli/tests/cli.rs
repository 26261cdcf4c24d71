use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_ivforge"));
    c.env_remove("IVFORGE_THREADS");
    c
}

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn config(name: &str) -> PathBuf {
    root().join("configs").join(name)
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn run_in(sub: &str, name: &str, out: &Path, extra: &[&str]) -> Output {
    let cfg = config(name);
    let mut args = vec![sub, "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    run(&args)
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Set `IVFORGE_BLESS=1` to rewrite the committed reference outputs.
fn golden(produced: &Path, reference: &Path) {
    let got = std::fs::read(produced).unwrap();
    if std::env::var_os("IVFORGE_BLESS").is_some() {
        std::fs::create_dir_all(reference.parent().unwrap()).unwrap();
        std::fs::write(reference, &got).unwrap();
        return;
    }
    let want = std::fs::read(reference).unwrap_or_else(|e| panic!("{}: {e}", reference.display()));
    assert!(got == want, "{} differs from {}", produced.display(), reference.display());
}

#[test]
fn sweep_matches_reference_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let o = run_in("sweep", "fig1a.json", dir.path(), &["--threads", "2"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let golden_dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden/fig1a");
    golden(&dir.path().join("sweep.csv"), &golden_dir.join("sweep.csv"));
    golden(&dir.path().join("sweep.svg"), &golden_dir.join("sweep.svg"));
    let stdout = String::from_utf8(o.stdout).unwrap();
    assert!(stdout.contains("wrote") && stdout.contains("sweep.svg"));
}

#[test]
fn outputs_do_not_depend_on_thread_count() {
    for (sub, name) in [("semisynth", "semisynth.json"), ("sweep", "fig1b.json"), ("diagnose", "diagnose.json")] {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        assert_eq!(run_in(sub, name, a.path(), &["--threads", "1", "--format", "json"]).status.code(), Some(0));
        assert_eq!(run_in(sub, name, b.path(), &["--threads", "4", "--format", "json"]).status.code(), Some(0));
        let mut files: Vec<_> = std::fs::read_dir(a.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
        files.sort();
        assert!(!files.is_empty());
        for f in files {
            let (x, y) = (std::fs::read(a.path().join(&f)).unwrap(), std::fs::read(b.path().join(&f)).unwrap());
            assert!(x == y, "{name}: {f:?} differs between 1 and 4 threads");
        }
    }
}

#[test]
fn env_threads_fallback_matches_flag() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    assert_eq!(run_in("sweep", "fig1b.json", a.path(), &["--threads", "3"]).status.code(), Some(0));
    let cfg = config("fig1b.json");
    let o = bin()
        .env("IVFORGE_THREADS", "2")
        .args(["sweep", "--config", cfg.to_str().unwrap(), "--out", b.path().to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(std::fs::read(a.path().join("sweep.csv")).unwrap(), std::fs::read(b.path().join("sweep.csv")).unwrap());

    let bad = bin()
        .env("IVFORGE_THREADS", "many")
        .args(["sweep", "--config", cfg.to_str().unwrap(), "--out", b.path().to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(bad.status.code(), Some(2));
    assert!(stderr(&bad).contains("IVFORGE_THREADS"));
}

#[test]
fn every_example_config_runs() {
    let dir = tempfile::tempdir().unwrap();
    for (sub, name) in [
        ("sweep", "fig1a.json"),
        ("sweep", "fig1b.json"),
        ("semisynth", "semisynth.json"),
        ("simulate", "adversarial.json"),
        ("audit", "audit.json"),
        ("calibrate", "calibrate.json"),
        ("diagnose", "diagnose.json"),
    ] {
        let o = run_in(sub, name, &dir.path().join(name), &[]);
        assert_eq!(o.status.code(), Some(0), "{name}: {}", stderr(&o));
    }
}

#[test]
fn seed_override_changes_output() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    assert_eq!(run_in("simulate", "adversarial.json", a.path(), &[]).status.code(), Some(0));
    assert_eq!(run_in("simulate", "adversarial.json", b.path(), &["--seed", "5"]).status.code(), Some(0));
    assert_ne!(std::fs::read(a.path().join("dataset.csv")).unwrap(), std::fs::read(b.path().join("dataset.csv")).unwrap());
}

#[test]
fn missing_config_names_the_path() {
    let o = run(&["sweep", "--config", "/nonexistent/fig.json"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("/nonexistent/fig.json"));
}

#[test]
fn malformed_config_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{"dgp": {"variant": "linear_interaction"}, "n": 10, "seed": 1, "colour": 3}"#).unwrap();
    let o = run(&["simulate", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("colour"));
}

#[test]
fn unknown_flag_is_a_config_error() {
    let o = run(&["sweep", "--bogus"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn audit_with_absent_excluded_column_is_unidentified() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("audit.json");
    let data = root().join("configs/data/audit_demo.csv");
    std::fs::write(
        &cfg,
        format!(
            r#"{{"data": "{}", "roles": {{"y": "outcome", "d": "treatment", "x1": "covariate", "x2": "covariate"}},
                "instrument": {{"kind": "excluded_column", "column": 0}}}}"#,
            data.display()
        ),
    )
    .unwrap();
    let o = run(&["audit", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).to_lowercase().contains("excluded"));
}

#[test]
fn calibration_without_root_is_unidentified() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cal.json");
    std::fs::write(
        &cfg,
        r#"{"model": "probit", "sigma": {"sigma_d2": 1.0, "sigma_x1_2": 1.0, "sigma_x2_2": 1.0, "rho": 0.3, "sigma_eps2": 1.0, "kappa": 0.0}}"#,
    )
    .unwrap();
    let o = run(&["calibrate", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("no root"));
}

#[test]
fn unwritable_output_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    std::fs::write(&blocker, "x").unwrap();
    let o = run_in("sweep", "fig1b.json", &blocker.join("sub"), &[]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
}

#[test]
fn calibrate_prints_alpha_and_residual() {
    let o = run(&["calibrate", "--config", config("calibrate.json").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    let stdout = String::from_utf8(o.stdout).unwrap();
    assert!(stdout.contains("alpha1 = ") && stdout.contains("residual = "));
}
