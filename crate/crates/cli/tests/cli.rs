use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const DG1: &str = include_str!("../../../problems/dg1.prob");

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_impulse"));
    c.env_remove("IMPULSE_OUT_DIR");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn small_dg1() -> String {
    DG1.replace("x1 = -6 6 241", "x1 = -6 6 61")
        .replace("time_steps = 100", "time_steps = 25")
}

fn write_problem(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn solve(problem: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![
        "solve",
        problem.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ];
    args.extend_from_slice(extra);
    run(&args)
}

fn manifest_hash(out: &Path) -> String {
    let m: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    m["problem"]["sha256"].as_str().unwrap().to_string()
}

#[test]
fn solve_writes_field_report_and_manifest() {
    let tmp = TempDir::new().unwrap();
    let p = write_problem(tmp.path(), "p.prob", &small_dg1());
    let out = tmp.path().join("out");
    let o = solve(&p, &out, &[]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    for f in ["value.csv", "report.json", "manifest.json"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    let m: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["scheme"], "qvi");
    assert_eq!(m["mesh"]["steps"], 25);
    assert_eq!(m["convergence"]["converged"], true);
    assert!(m["threads"].as_u64().unwrap() >= 1);
}

#[test]
fn out_dir_defaults_to_environment() {
    let tmp = TempDir::new().unwrap();
    let p = write_problem(tmp.path(), "p.prob", &small_dg1());
    let out = tmp.path().join("from-env");
    let o = bin()
        .args(["solve", p.to_str().unwrap(), "--scheme", "gamma"])
        .env("IMPULSE_OUT_DIR", &out)
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(out.join("gamma.csv").exists());
}

#[test]
fn manifest_hash_changes_iff_bytes_change() {
    let tmp = TempDir::new().unwrap();
    let text = small_dg1();
    let a = write_problem(tmp.path(), "a.prob", &text);
    let b = write_problem(tmp.path(), "b.prob", &text);
    let c = write_problem(tmp.path(), "c.prob", &format!("{text}# trailing comment\n"));
    let mut hashes = Vec::new();
    for (i, p) in [&a, &b, &c].into_iter().enumerate() {
        let out = tmp.path().join(format!("o{i}"));
        assert_eq!(solve(p, &out, &[]).status.code(), Some(0));
        hashes.push(manifest_hash(&out));
    }
    assert_eq!(hashes[0], hashes[1]);
    assert_ne!(hashes[0], hashes[2]);
    assert_eq!(hashes[0].len(), 64);
}

#[test]
fn missing_problem_file_is_input_error() {
    let o = run(&["solve", "/nonexistent/problem.prob"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn unknown_builtin_is_input_error() {
    let o = run(&["catalog", "nope"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn bad_arguments_are_input_errors() {
    assert_eq!(run(&["solve"]).status.code(), Some(1));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(run(&["--threads", "0", "catalog"]).status.code(), Some(1));
}

#[test]
fn malformed_dynamics_cites_section_and_offset() {
    let tmp = TempDir::new().unwrap();
    let p = write_problem(
        tmp.path(),
        "bad.prob",
        &small_dg1().replace("f1 = tau1", "f1 = tau1 +* 2"),
    );
    let o = solve(&p, &tmp.path().join("o"), &[]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.contains("[dynamics]"), "{err}");
    assert!(err.contains("f1"), "{err}");
    assert!(err.contains("offset 6"), "{err}");
}

#[test]
fn inner_non_convergence_exits_2() {
    let tmp = TempDir::new().unwrap();
    let p = write_problem(
        tmp.path(),
        "p.prob",
        &small_dg1().replace("max_sweeps = 50", "max_sweeps = 1"),
    );
    let o = solve(&p, &tmp.path().join("o"), &[]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn impulse_budget_exhaustion_is_reported_not_fatal() {
    let tmp = TempDir::new().unwrap();
    let p = write_problem(
        tmp.path(),
        "p.prob",
        &small_dg1().replace("n_max = 32", "n_max = 1"),
    );
    let out = tmp.path().join("o");
    let o = solve(&p, &out, &["--scheme", "wn"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(
        stdout(&o).contains("not converged at n_max = 1"),
        "{}",
        stdout(&o)
    );
    let m = fs::read_to_string(out.join("manifest.json")).unwrap();
    assert!(m.contains("not converged at n_max = 1"));
}

#[test]
fn csv_round_trip_passes_checks() {
    let tmp = TempDir::new().unwrap();
    let p = write_problem(tmp.path(), "p.prob", &small_dg1());
    let out = tmp.path().join("o");
    assert_eq!(solve(&p, &out, &[]).status.code(), Some(0));
    let field = out.join("value.csv");
    let o = run(&[
        "check",
        p.to_str().unwrap(),
        "--field",
        field.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert!(!stdout(&o).contains("FAIL"));
}

#[test]
fn corrupted_field_fails_with_witness() {
    let tmp = TempDir::new().unwrap();
    let p = write_problem(tmp.path(), "p.prob", &small_dg1());
    let out = tmp.path().join("o");
    assert_eq!(solve(&p, &out, &[]).status.code(), Some(0));
    let field = out.join("value.csv");
    let text = fs::read_to_string(&field).unwrap();
    let mut hit = false;
    let corrupted: Vec<String> = text
        .lines()
        .map(|l| {
            if l.starts_with("0.4,0,") {
                hit = true;
                "0.4,0,100".to_string()
            } else {
                l.to_string()
            }
        })
        .collect();
    assert!(hit);
    fs::write(&field, corrupted.join("\n") + "\n").unwrap();
    let o = run(&[
        "check",
        p.to_str().unwrap(),
        "--field",
        field.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(3));
    let s = stdout(&o);
    assert!(s.contains("FAIL"), "{s}");
    assert!(s.contains("witness: t = 0.4"), "{s}");
}

#[test]
fn field_with_wrong_grid_is_input_error() {
    let tmp = TempDir::new().unwrap();
    let p = write_problem(tmp.path(), "p.prob", &small_dg1());
    let out = tmp.path().join("o");
    assert_eq!(solve(&p, &out, &[]).status.code(), Some(0));
    let o = run(&[
        "check",
        "builtin:dg1",
        "--field",
        out.join("value.csv").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn export_slice_and_svg() {
    let tmp = TempDir::new().unwrap();
    let p = write_problem(tmp.path(), "p.prob", &small_dg1());
    let out = tmp.path().join("o");
    assert_eq!(solve(&p, &out, &[]).status.code(), Some(0));
    let field = out.join("value.csv");
    let ex = tmp.path().join("ex");
    let o = run(&[
        "export",
        p.to_str().unwrap(),
        "--field",
        field.to_str().unwrap(),
        "--svg",
        "--slice",
        "t=0.2",
        "--out",
        ex.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let svg = fs::read_to_string(ex.join("value.svg")).unwrap();
    assert!(svg.starts_with("<svg") || svg.starts_with("<?xml"));
    assert!(svg.contains("#ff2d2d"), "binding outline missing");
    let slice = fs::read_to_string(ex.join("slice.csv")).unwrap();
    assert!(slice.contains("# slice: 0.2 5"), "{slice}");
    assert_eq!(slice.lines().filter(|l| !l.starts_with('#')).count(), 62);
    assert!(ex.join("manifest.json").exists());
}

#[test]
fn export_slice_out_of_range() {
    let tmp = TempDir::new().unwrap();
    let p = write_problem(tmp.path(), "p.prob", &small_dg1());
    let out = tmp.path().join("o");
    assert_eq!(solve(&p, &out, &[]).status.code(), Some(0));
    let o = run(&[
        "export",
        p.to_str().unwrap(),
        "--field",
        out.join("value.csv").to_str().unwrap(),
        "--slice",
        "t=2",
        "--out",
        tmp.path().join("ex").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("slice out of range"));
}

#[test]
fn thread_count_does_not_change_output() {
    let tmp = TempDir::new().unwrap();
    let p = write_problem(tmp.path(), "p.prob", &small_dg1());
    let (a, b) = (tmp.path().join("t1"), tmp.path().join("t8"));
    assert_eq!(solve(&p, &a, &["--threads", "1"]).status.code(), Some(0));
    assert_eq!(solve(&p, &b, &["--threads", "8"]).status.code(), Some(0));
    assert_eq!(
        fs::read(a.join("value.csv")).unwrap(),
        fs::read(b.join("value.csv")).unwrap()
    );
}

#[test]
fn oracle_query_and_clamp_count() {
    let o = run(&["oracle", "builtin:dg1", "--at", "0:3", "--at", "8:1"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let s = stdout(&o);
    assert!(s.contains("t=1 x=[1.0] value=1"), "{s}");
    assert!(s.contains("clamped snaps:"));
    let bad = run(&["oracle", "builtin:dg1", "--at", "0:0.1"]);
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn simulate_writes_trajectory() {
    let tmp = TempDir::new().unwrap();
    let p = write_problem(tmp.path(), "p.prob", &small_dg1());
    let out = tmp.path().join("o");
    let o = run(&[
        "simulate",
        p.to_str().unwrap(),
        "--start",
        "3",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = fs::read_to_string(out.join("trajectory.csv")).unwrap();
    assert!(csv.starts_with("t,x1,decision,incremental_cost,cumulative\n"));
    assert_eq!(csv.lines().count(), 27);
    let r = run(&[
        "simulate",
        p.to_str().unwrap(),
        "--start",
        "0",
        "--adversary",
        "fixed:1",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(r.status.code(), Some(0), "{}", stderr(&r));
    let bad = run(&[
        "simulate",
        p.to_str().unwrap(),
        "--start",
        "0",
        "--adversary",
        "nice",
    ]);
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn catalog_lists_and_prints() {
    let o = run(&["catalog"]);
    assert_eq!(stdout(&o), "dg1\ndg1-rich\ntxcost\n");
    let d = run(&["catalog", "dg1"]);
    assert_eq!(stdout(&d), DG1);
}
