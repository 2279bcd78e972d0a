use std::process::Command;

fn gvcl() -> Command {
    Command::new(env!("CARGO_BIN_EXE_gvcl"))
}

#[test]
fn verify_passes() {
    let out = gvcl().arg("verify").output().unwrap();
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(out.status.success(), "{stdout}");
    assert!(stdout.contains("0 failed"), "{stdout}");
}

#[test]
fn toy_writes_its_csv() {
    let dir = tempfile::tempdir().unwrap();
    let out = gvcl().args(["toy", "film-scale", "--out"]).arg(dir.path()).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("100/100"));
    let csv = dir.path().join("toys/film-scale.csv");
    assert!(csv::Reader::from_path(csv).unwrap().records().count() >= 100);
}

#[test]
fn unknown_toy_fails() {
    let out = gvcl().args(["toy", "nope"]).output().unwrap();
    assert!(!out.status.success());
}

#[test]
fn run_reports_a_summary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(
        &cfg,
        "name = \"c\"\nseeds = [0]\n[dataset]\nkind = \"toy_clusters\"\nn_per_class = 10\nspread = 0.4\n\
         [architecture]\nkind = \"mlp\"\ninput = 2\nhidden = [4]\n[methods.gvcl_film]\nepochs = 2\neval_samples = 2\n",
    )
    .unwrap();
    let out = gvcl()
        .args(["--jobs", "1", "--out"])
        .arg(dir.path())
        .arg("run")
        .arg(&cfg)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("gvcl_film"));
    assert!(dir.path().join("c/metrics.csv").is_file());
}

#[test]
fn bad_config_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "name = \"x\"\nseeds = [0]\nbogus = 1\n").unwrap();
    let out = gvcl().arg("run").arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bad.toml"));
}
