use std::process::{Command, Output};

fn usk(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_usk")).args(args).output().unwrap()
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(usk(&[]).status.code(), Some(1));
    assert_eq!(usk(&["train", "--bogus"]).status.code(), Some(1));
    assert_eq!(usk(&["train", "--data", "x", "--out", "y", "--budget", "9"]).status.code(), Some(1));
    assert_eq!(usk(&["--version"]).status.code(), Some(0));
}

#[test]
fn missing_inputs_are_user_errors_on_one_line() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nothing");
    let out = usk(&[
        "partition",
        "--data",
        missing.to_str().unwrap(),
        "--out",
        dir.path().join("plan").to_str().unwrap(),
        "--target-size",
        "1",
    ]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.starts_with("usk partition: error:"), "{err}");
    assert_eq!(err.trim_end().lines().count(), 1);
}

#[test]
fn dumped_config_reads_back() {
    let dir = tempfile::tempdir().unwrap();
    let out = usk(&["train", "--data", "d", "--out", "o", "--levels", "2", "--budget", "30", "--dump-config"]);
    assert!(out.status.success());
    let path = dir.path().join("cfg.toml");
    std::fs::write(&path, &out.stdout).unwrap();
    let again = usk(&["train", "--data", "d", "--out", "o", "--config", path.to_str().unwrap(), "--dump-config"]);
    assert!(again.status.success());
    assert_eq!(out.stdout, again.stdout);
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "no_such_key = 1\n").unwrap();
    let out = usk(&["train", "--data", "d", "--out", "o", "--config", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
}
