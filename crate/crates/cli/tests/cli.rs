use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn il_lab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_il-lab"))
        .args(args)
        .env_remove("IL_LAB_OUT")
        .output()
        .expect("binary runs")
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn config(name: &str) -> String {
    configs().join(name).to_string_lossy().into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn run_writes_reports_and_trace() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let res = il_lab(&["run", &config("plain-honest.json"), "--out", out, "--trace"]);
    assert!(res.status.success(), "{}", stderr(&res));
    for file in ["report.csv", "report.json", "report.md", "trace.jsonl"] {
        assert!(dir.path().join(file).is_file(), "{file}");
    }
    let stdout = String::from_utf8(res.stdout).unwrap();
    assert!(stdout.contains("| plain-honest | plain | 4 | 1 | 3 |"), "{stdout}");
}

#[test]
fn same_seed_gives_identical_files() {
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for dir in &dirs {
        let res = il_lab(&[
            "run",
            &config("base-censor.json"),
            "--out",
            dir.path().to_str().unwrap(),
            "--seed",
            "11",
        ]);
        assert!(res.status.success(), "{}", stderr(&res));
    }
    for file in ["report.csv", "report.json", "report.md", "trace.jsonl"] {
        let a = std::fs::read(dirs[0].path().join(file)).unwrap();
        let b = std::fs::read(dirs[1].path().join(file)).unwrap();
        assert_eq!(a, b, "{file}");
    }
}

#[test]
fn env_var_sets_output_dir() {
    let dir = tempfile::tempdir().unwrap();
    let res = Command::new(env!("CARGO_BIN_EXE_il-lab"))
        .args(["run", &config("plain-honest.json")])
        .env("IL_LAB_OUT", dir.path())
        .output()
        .unwrap();
    assert!(res.status.success(), "{}", stderr(&res));
    assert!(dir.path().join("report.json").is_file());
}

#[test]
fn config_errors_exit_2_and_name_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"net": {"n": 4, "f": 2}}"#).unwrap();
    let res = il_lab(&["run", bad.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(2));
    assert!(
        stderr(&res).contains("net.n") && stderr(&res).contains("n ≥ 3f+1 violated"),
        "{}",
        stderr(&res)
    );

    std::fs::write(&bad, r#"{"protocol": {"variant": "il-foo"}}"#).unwrap();
    let res = il_lab(&["run", bad.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(2));
    assert!(stderr(&res).contains("il-foo"), "{}", stderr(&res));

    let res = il_lab(&["run", dir.path().join("missing.json").to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(2));
}

#[test]
fn round_cap_exits_3_with_partial_trace() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let res = il_lab(&["run", &config("base-censor.json"), "--out", out, "--max-rounds", "4"]);
    assert_eq!(res.status.code(), Some(3), "{}", stderr(&res));
    let trace = std::fs::read_to_string(dir.path().join("trace.jsonl")).unwrap();
    assert!(trace.lines().count() > 0);
}

#[test]
fn sweep_and_table() {
    let dir = tempfile::tempdir().unwrap();
    let sweep_dir = dir.path().join("sweep");
    let res = il_lab(&[
        "sweep",
        &config("sweep-honest.json"),
        "--out",
        sweep_dir.to_str().unwrap(),
    ]);
    assert!(res.status.success(), "{}", stderr(&res));
    let csv = std::fs::read_to_string(sweep_dir.join("report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 13);

    let run_dir = dir.path().join("run");
    assert!(
        il_lab(&["run", &config("plain-honest.json"), "--out", run_dir.to_str().unwrap()])
            .status
            .success()
    );
    let table_dir = dir.path().join("table");
    let res = il_lab(&[
        "table",
        sweep_dir.join("report.json").to_str().unwrap(),
        run_dir.join("report.json").to_str().unwrap(),
        "--out",
        table_dir.to_str().unwrap(),
    ]);
    assert!(res.status.success(), "{}", stderr(&res));
    let merged = std::fs::read_to_string(table_dir.join("report.csv")).unwrap();
    assert_eq!(merged.lines().count(), 14);
}

#[test]
fn bribery_sweep_grid() {
    let dir = tempfile::tempdir().unwrap();
    let res = il_lab(&[
        "sweep",
        &config("sweep-bribery.json"),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(res.status.success(), "{}", stderr(&res));
    let csv = std::fs::read_to_string(dir.path().join("bribery.csv")).unwrap();
    assert_eq!(csv.lines().count(), 11);
    for line in csv.lines().skip(1) {
        let fields: Vec<&str> = line.split(',').collect();
        assert_eq!(fields[5], fields[6], "{line}");
    }
}

#[test]
fn empty_grid_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let grid = dir.path().join("grid.json");
    std::fs::write(&grid, r#"{"variants": [], "sizes": [{"n": 4, "f": 1}]}"#).unwrap();
    let res = il_lab(&["sweep", grid.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(2));
    assert!(stderr(&res).contains("variants"), "{}", stderr(&res));
}

#[test]
fn verify_subset() {
    let res = il_lab(&["verify", "--only", "2,10"]);
    assert!(res.status.success(), "{}", stderr(&res));
    let stdout = String::from_utf8(res.stdout).unwrap();
    assert!(stdout.contains("[PASS]  2") && stdout.contains("[PASS] 10"), "{stdout}");
    assert_eq!(il_lab(&["verify", "--only", "99"]).status.code(), Some(2));
}
