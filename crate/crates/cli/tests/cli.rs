use std::process::Command;

fn porodiff() -> Command {
    Command::new(env!("CARGO_BIN_EXE_porodiff"))
}

#[test]
fn convergence_writes_table() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("conv");
    let status = porodiff()
        .args(["convergence", "--levels", "2,4", "--output"])
        .arg(&out)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
    let stdout = String::from_utf8_lossy(&status.stdout);
    assert!(stdout.contains("last-pair rates"), "{stdout}");
    assert!(out.join("provenance.json").is_file());
    assert!(std::fs::read_dir(&out).unwrap().count() >= 2);
}

#[test]
fn small_slab_run() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("slab");
    let status = porodiff()
        .args(["slab", "--nx", "4", "--ny", "4", "--dt", "50", "--tend", "100", "--output"])
        .arg(&out)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
    assert!(String::from_utf8_lossy(&status.stdout).contains("t = 100"));
}

#[test]
fn bad_input_fails() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "unknown_key = 3\n").unwrap();
    let res = porodiff().args(["convergence", "--config"]).arg(&cfg).output().unwrap();
    assert!(!res.status.success());
    assert!(String::from_utf8_lossy(&res.stderr).contains("porodiff:"));

    let res = porodiff().args(["convergence", "--k", "3"]).output().unwrap();
    assert!(!res.status.success());
    let res = porodiff().args(["robustness", "--param", "density"]).output().unwrap();
    assert!(!res.status.success());
}
