use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_jumpfilter"))
}

fn m1() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../models/m1.json")
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

#[test]
fn validate_prints_constants() {
    let m = m1();
    let o = run(&["validate", "--model", m.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    let out = String::from_utf8_lossy(&o.stdout);
    assert!(out.contains("C_lambda=4.0") && out.contains("C_f=2.2"), "{out}");
}

#[test]
fn invalid_model_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"states":["0"],"obs":["a"],"h":["a"],"controls":["u"],"lambda":[[[0.0]]],"f":[[1.0]],"beta":-1.0}"#)
        .unwrap();
    assert_eq!(code(&run(&["validate", "--model", bad.to_str().unwrap()])), 1);
}

#[test]
fn usage_errors_exit_2_and_name_the_flag() {
    let m = m1();
    let m = m.to_str().unwrap();
    let o = run(&["solve", "--model", m, "--k", "0"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("--k"));
    let o = run(&["simulate-signal", "--model", m, "--seed", "1", "--control", "nope"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("--control"));
    // stochastic commands need a seed
    assert_eq!(code(&run(&["simulate-signal", "--model", m])), 2);
    assert_eq!(code(&run(&["frobnicate"])), 2);
}

#[test]
fn solve_writes_values_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let m = m1();
    let o = run(&[
        "solve", "--model", m.to_str().unwrap(), "--k", "16", "--mode", "A", "--tol", "1e-4", "--out",
        dir.path().to_str().unwrap(), "--json",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(dir.path().join("values.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 18);
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    assert!(report["report"]["residual"].as_f64().unwrap() <= 1e-4);
    let summary: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(summary["vertices"], 18);
}

/// Same seed, different thread counts: identical files.
#[test]
fn outputs_are_reproducible() {
    let m = m1();
    let m = m.to_str().unwrap();
    let mut payloads = Vec::new();
    for threads in ["1", "4"] {
        let dir = tempfile::tempdir().unwrap();
        let d = dir.path().to_str().unwrap();
        for args in [
            vec!["simulate-signal", "--seed", "11", "--horizon", "8", "--control", "u1"],
            vec!["simulate-pdmp", "--seed", "11", "--x0", "2"],
            vec!["evaluate", "--seed", "11", "--k", "8", "--n-paths", "2000", "--horizon", "5"],
        ] {
            let mut full = args.clone();
            full.extend(["--model", m, "--out", d, "--threads", threads]);
            let o = run(&full);
            assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        }
        let obs = dir.path().join("observations.json");
        let o = run(&["filter", "--model", m, "--obs", obs.to_str().unwrap(), "--control", "u1", "--out", d]);
        assert_eq!(code(&o), 0);
        let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(dir.path())
            .unwrap()
            .map(|e| {
                let e = e.unwrap();
                (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
            })
            .collect();
        files.sort();
        payloads.push(files);
    }
    let names: Vec<&str> = payloads[0].iter().map(|f| f.0.as_str()).collect();
    assert_eq!(
        names,
        ["beliefs.csv", "evaluation.json", "observations.json", "pdmp.json", "report.json", "signal.json", "values.csv"]
    );
    assert_eq!(payloads[0], payloads[1]);
}

#[test]
fn filter_replays_a_given_observation_file() {
    let dir = tempfile::tempdir().unwrap();
    let obs = dir.path().join("obs.json");
    fs::write(&obs, r#"{"y0": "a", "jumps": [{"t": 0.5, "y": "b"}]}"#).unwrap();
    let m = m1();
    let o = run(&[
        "filter", "--model", m.to_str().unwrap(), "--obs", obs.to_str().unwrap(), "--horizon", "1", "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0);
    let csv = fs::read_to_string(dir.path().join("beliefs.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows[0], "t,face,w_0,w_1,w_2");
    assert_eq!(rows[1], "0,a,0.5,0.5,0");
    assert!(rows.iter().any(|r| r.starts_with("0.5,b,0,0,1")));
}
