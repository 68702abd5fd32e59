use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"
[data]
test_identities = 6
[model]
widths = [16]
[pretrain]
epochs = 2
iters_per_epoch = 3
milestones = []
identities_per_domain = 4
samples_per_identity = 4
[adapt]
epochs = 1
iters_per_epoch = 2
identities_per_domain = 4
samples_per_identity = 4
"#;

fn damix(args: &[&str], out_env: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_damix"))
        .args(args)
        .env("DAMIX_OUT", out_env)
        .env("RUST_LOG", "error")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn verify_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = damix(&["verify"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert!(stdout(&o).contains("checks passed"));
    assert!(!stdout(&o).contains("FAIL"));
}

#[test]
fn run_then_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.toml");
    fs::write(&cfg, SMALL).unwrap();
    let o = damix(&["run", cfg.to_str().unwrap(), "--seed", "3"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let manifest = stdout(&o).trim().to_string();
    assert!(manifest.starts_with(dir.path().to_str().unwrap()));
    assert!(manifest.contains("-s3"));

    let o = damix(&["report", &manifest, "--format", "csv"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).starts_with("stage,epoch,map"), "{}", stdout(&o));

    let o = damix(&["report", &manifest, "--format", "json"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("\"epochs\""));
}

#[test]
fn stage_and_out_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.toml");
    fs::write(&cfg, SMALL).unwrap();
    let out = dir.path().join("elsewhere");
    let o = damix(&["run", cfg.to_str().unwrap(), "--stage", "pretrain", "--out", out.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(0));
    let manifest = stdout(&o).trim().to_string();
    assert!(manifest.starts_with(out.to_str().unwrap()));
    let run_dir = Path::new(&manifest).parent().unwrap();
    assert!(run_dir.join("pretrain").exists());
    assert!(!run_dir.join("adapt").exists());
}

#[test]
fn config_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[pretrain]\nepochs = \"many\"\n").unwrap();
    let o = damix(&["run", cfg.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(1));
    let o = damix(&["run", dir.path().join("missing.toml").to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn malformed_manifest_exits_nonzero_and_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("broken_manifest.json");
    fs::write(&bad, "[]").unwrap();
    let o = damix(&["report", bad.to_str().unwrap()], dir.path());
    assert_ne!(o.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&o.stderr).contains("broken_manifest.json"));
}

#[test]
fn gen_data_writes_splits() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("data");
    let o = damix(&["gen-data", "--out", out.to_str().unwrap(), "--seed", "4"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    for f in ["domain0.dmx", "domain1.csv", "domain2.dmx", "target_test.csv"] {
        assert!(out.join(f).exists(), "{f}");
    }
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(damix(&["run"], dir.path()).status.code(), Some(1));
    assert_eq!(damix(&["frobnicate"], dir.path()).status.code(), Some(1));
    assert_eq!(damix(&["--help"], dir.path()).status.code(), Some(0));
}
