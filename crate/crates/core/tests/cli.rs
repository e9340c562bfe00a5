use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_quantstat");

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn generate(dir: &Path, members: &str) -> (String, String) {
    let m = dir.join("m.csv").display().to_string();
    let e = dir.join("e.csv").display().to_string();
    let out = run(&[
        "generate",
        "--members",
        members,
        "--seed",
        "3",
        "--metrics-out",
        &m,
        "--exposures-out",
        &e,
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    (m, e)
}

#[test]
fn compute_writes_one_row_per_cell_and_quantile() {
    let dir = tempfile::tempdir().unwrap();
    let (m, e) = generate(dir.path(), "800");
    let report = dir.path().join("report.jsonl");
    let out = run(&[
        "compute",
        "--metrics",
        &m,
        "--exposures",
        &e,
        "--quantiles",
        "0.5,0.9",
        "--method",
        "proposed_dynamic",
        "--control",
        "control",
        "--out",
        report.to_str().unwrap(),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let text = fs::read_to_string(&report).unwrap();
    let rows: Vec<serde_json::Value> = text
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    // Two variants, one dimension, two quantiles.
    assert_eq!(rows.len(), 4);
    for r in &rows {
        assert_eq!(r["method"], "proposed_dynamic");
        assert_eq!(r["p_value"].is_null(), r["variant"] == "control");
    }
    assert!(String::from_utf8_lossy(&out.stdout).contains("p-value"));
}

#[test]
fn reports_are_byte_identical_across_runs_and_workers() {
    let dir = tempfile::tempdir().unwrap();
    let (m, e) = generate(dir.path(), "600");
    let mut outputs = Vec::new();
    for (i, workers) in ["1", "3"].iter().enumerate() {
        let path = dir.path().join(format!("r{i}.jsonl"));
        let out = Command::new(BIN)
            .env("QUANTSTAT_WORKERS", workers)
            .args([
                "compute",
                "--metrics",
                &m,
                "--exposures",
                &e,
                "--out",
                path.to_str().unwrap(),
            ])
            .output()
            .unwrap();
        assert!(out.status.success());
        outputs.push(fs::read(path).unwrap());
    }
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn rows_go_to_stdout_without_out() {
    let dir = tempfile::tempdir().unwrap();
    let (m, e) = generate(dir.path(), "300");
    let out = run(&[
        "compute",
        "--metrics",
        &m,
        "--exposures",
        &e,
        "--method",
        "naive_iid",
        "--quantiles",
        "0.9",
    ]);
    assert!(out.status.success());
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert_eq!(stdout.lines().count(), 2);
    assert!(stdout
        .lines()
        .all(|l| l.contains("\"method\":\"naive_iid\"")));
}

#[test]
fn bootstrap_selects_cells() {
    let dir = tempfile::tempdir().unwrap();
    let (m, e) = generate(dir.path(), "300");
    let out = run(&[
        "bootstrap",
        "--metrics",
        &m,
        "--exposures",
        &e,
        "--variant",
        "treatment",
        "--quantiles",
        "0.5",
        "--replicates",
        "100",
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert_eq!(stdout.lines().count(), 1);
    assert!(
        stdout.contains("\"variant\":\"treatment\"") && stdout.contains("\"method\":\"bootstrap\"")
    );

    let none = run(&[
        "bootstrap",
        "--metrics",
        &m,
        "--exposures",
        &e,
        "--variant",
        "nope",
    ]);
    assert_eq!(none.status.code(), Some(2));
}

#[test]
fn empty_metrics_give_empty_report() {
    let dir = tempfile::tempdir().unwrap();
    let m = dir.path().join("m.csv");
    let e = dir.path().join("e.csv");
    fs::write(
        &m,
        "member_id,geo,platform,page_key,load_time_ms,timestamp\n",
    )
    .unwrap();
    fs::write(
        &e,
        "member_id,experiment_id,segment_id,variant,timestamp\n1,x,s,a,2023-04-01\n",
    )
    .unwrap();
    let out = run(&[
        "compute",
        "--metrics",
        m.to_str().unwrap(),
        "--exposures",
        e.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    assert!(out.stdout.is_empty());
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(run(&["compute"]).status.code(), Some(2));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(
        run(&["evaluate", "--datasets", "many"]).status.code(),
        Some(2)
    );
    let missing = run(&[
        "compute",
        "--metrics",
        "/no/such/m.csv",
        "--exposures",
        "/no/such/e.csv",
    ]);
    assert_eq!(missing.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("/no/such/m.csv"));
}

#[test]
fn malformed_input_names_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let (m, e) = generate(dir.path(), "50");
    let mut text = fs::read_to_string(&m).unwrap();
    text.push_str("7,us,desktop,feed,abc,2023-04-02\n");
    let line = text.lines().count();
    fs::write(&m, text).unwrap();
    let out = run(&["compute", "--metrics", &m, "--exposures", &e]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains(&format!(":{line}:")));
    assert!(out.stdout.is_empty());
}

#[test]
fn computation_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let m = dir.path().join("m.csv");
    let e = dir.path().join("e.csv");
    fs::write(
        &m,
        "member_id,geo,platform,page_key,load_time_ms,timestamp\n1,us,ios,feed,10,2023-04-01\n",
    )
    .unwrap();
    fs::write(
        &e,
        "member_id,experiment_id,segment_id,variant,timestamp\n1,x,s,a,2023-04-01\n",
    )
    .unwrap();
    let out = run(&[
        "compute",
        "--metrics",
        m.to_str().unwrap(),
        "--exposures",
        e.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("x/s/a"));
}

#[test]
fn help_lists_subcommands() {
    let out = run(&["--help"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    for cmd in ["compute", "bootstrap", "generate", "evaluate", "aa-sim"] {
        assert!(text.contains(cmd), "{cmd} missing from help");
    }
}

#[test]
fn evaluate_prints_error_table() {
    let out = run(&[
        "evaluate",
        "--datasets",
        "6",
        "--members",
        "400",
        "--replicates",
        "100",
        "--seed",
        "7",
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("err dynamic") && text.contains("Total"));
}

#[test]
fn aa_sim_reports_rate() {
    let out = run(&[
        "aa-sim",
        "--members",
        "300",
        "--replications",
        "100",
        "--seed",
        "2",
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(String::from_utf8(out.stdout).unwrap().contains("rate"));
}
