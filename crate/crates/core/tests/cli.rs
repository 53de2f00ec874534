use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use recurstrat::io::FitRecord;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_recurstrat"));
    c.env_remove("RECURSTRAT_SEED");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn simulate(dir: &Path, scenario: &str, population: &str, extra: &[&str]) -> Output {
    let mut args = vec!["simulate", "--scenario", scenario, "--population", population, "--out", dir.to_str().unwrap()];
    args.extend_from_slice(extra);
    run(&args)
}

fn read(dir: &Path, name: &str) -> Vec<u8> {
    fs::read(dir.join(name)).unwrap()
}

#[test]
fn simulate_is_byte_identical_for_equal_seeds() {
    let (a, b, c) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    assert!(simulate(a.path(), "3", "20000", &["--seed", "4"]).status.success());
    assert!(simulate(b.path(), "3", "20000", &["--seed", "4"]).status.success());
    assert!(simulate(c.path(), "3", "20000", &["--seed", "5"]).status.success());
    for f in ["subjects.csv", "events.csv", "census.csv", "truth.json"] {
        assert_eq!(read(a.path(), f), read(b.path(), f), "{f}");
    }
    assert_ne!(read(a.path(), "events.csv"), read(c.path(), "events.csv"));
}

#[test]
fn seed_falls_back_to_environment() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    assert!(simulate(a.path(), "1", "10000", &["--seed", "9"]).status.success());
    let out = bin()
        .env("RECURSTRAT_SEED", "9")
        .args(["simulate", "--scenario", "1", "--population", "10000", "--out", b.path().to_str().unwrap()])
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(read(a.path(), "events.csv"), read(b.path(), "events.csv"));
}

#[test]
fn exit_codes_and_overwrite_protection() {
    assert_eq!(run(&["--help"]).status.code(), Some(0));
    assert_eq!(run(&["simulate", "--scenario", "9"]).status.code(), Some(1));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(1));
    let d = tempfile::tempdir().unwrap();
    assert!(simulate(d.path(), "1", "5000", &[]).status.success());
    let again = simulate(d.path(), "1", "5000", &[]);
    assert_eq!(again.status.code(), Some(1));
    assert!(simulate(d.path(), "1", "5000", &["--force"]).status.success());
    let p = d.path().to_str().unwrap();
    let zt_v = run(&[
        "fit", "--subjects", &format!("{p}/subjects.csv"), "--events", &format!("{p}/events.csv"),
        "--approach", "zt", "--model", "ssv", "--out", p,
    ]);
    assert_eq!(zt_v.status.code(), Some(1));
}

#[test]
fn schema_errors_leave_no_partial_outputs() {
    let d = tempfile::tempdir().unwrap();
    assert!(simulate(d.path(), "1", "5000", &[]).status.success());
    let p = d.path();
    let mut subjects = fs::read_to_string(p.join("subjects.csv")).unwrap();
    subjects.push_str("999999,not-a-number,7,0,0,0\n");
    fs::write(p.join("subjects.csv"), subjects).unwrap();
    let out_dir = p.join("fit");
    let out = run(&[
        "fit",
        "--subjects", p.join("subjects.csv").to_str().unwrap(),
        "--events", p.join("events.csv").to_str().unwrap(),
        "--census", p.join("census.csv").to_str().unwrap(),
        "--approach", "census", "--model", "nnc",
        "--out", out_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let lines = fs::read_to_string(p.join("subjects.csv")).unwrap().lines().count();
    assert!(String::from_utf8_lossy(&out.stderr).contains(&format!("subjects.csv:{lines}:")));
    assert!(!out_dir.join("fit.json").exists());
    assert!(!out_dir.join("baseline.csv").exists());
}

#[test]
fn ideal_fit_recovers_truth_on_each_preset() {
    let truth = [
        ("1", "ssc", [[-2.0, -1.0, -1.5], [-2.0, -1.0, -1.5]]),
        ("2", "ssc", [[-2.0, -1.0, -1.5], [-1.0, 0.5, -0.5]]),
        ("3", "ssv", [[-2.0, -1.0, -1.5], [-1.0, 0.5, -0.5]]),
    ];
    for (sc, model, beta) in truth {
        let d = tempfile::tempdir().unwrap();
        let p = d.path();
        assert!(simulate(p, sc, "100000", &["--full", "--seed", "2"]).status.success());
        let out = run(&[
            "fit",
            "--subjects", p.join("subjects_full.csv").to_str().unwrap(),
            "--events", p.join("events_full.csv").to_str().unwrap(),
            "--approach", "ideal", "--model", model,
            "--out", p.to_str().unwrap(),
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let FitRecord::Ideal(fit) = FitRecord::from_json(&fs::read_to_string(p.join("fit.json")).unwrap()).unwrap() else {
            panic!("ideal record expected");
        };
        for s in 0..2 {
            for j in 0..3 {
                assert!((fit.beta[s][j] - beta[s][j]).abs() < 0.2, "scenario {sc}: {:?}", fit.beta);
            }
        }
        let baseline = fs::read_to_string(p.join("baseline.csv")).unwrap();
        assert!(baseline.starts_with("stratum,age,cumulative_baseline"));
    }
}

#[test]
fn census_fit_then_report_without_draws() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    assert!(simulate(p, "1", "30000", &[]).status.success());
    let ps = p.to_str().unwrap();
    let out = run(&[
        "fit", "--subjects", &format!("{ps}/subjects.csv"), "--events", &format!("{ps}/events.csv"),
        "--census", &format!("{ps}/census.csv"), "--approach", "census", "--model", "nnc", "--out", ps,
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let rec = FitRecord::from_json(&fs::read_to_string(p.join("fit.json")).unwrap()).unwrap();
    assert!(rec.converged());
    let rep = run(&["report", "--fit", &format!("{ps}/fit.json"), "--out", ps]);
    assert!(rep.status.success());
    let msg = String::from_utf8_lossy(&rep.stdout).to_string() + &String::from_utf8_lossy(&rep.stderr);
    assert!(msg.to_lowercase().contains("band"), "{msg}");
    let curves = fs::read_to_string(p.join("baseline_curves.csv")).unwrap();
    assert!(curves.starts_with("stratum,age,estimate,lo95,hi95"));
    assert!(curves.lines().nth(1).unwrap().ends_with("NA,NA"));
}

#[test]
fn variance_and_study_write_outputs() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    assert!(simulate(p, "1", "20000", &[]).status.success());
    let ps = p.to_str().unwrap();
    let out = run(&[
        "variance", "--subjects", &format!("{ps}/subjects.csv"), "--events", &format!("{ps}/events.csv"),
        "--census", &format!("{ps}/census.csv"), "--model", "nnc", "--draws", "20", "--out", ps,
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(p.join("variance.csv")).unwrap();
    assert!(csv.starts_with("stratum,parameter,estimate,se"));
    let report = p.join("study.csv");
    let st = run(&[
        "study", "--scenario", "1", "--replicates", "2", "--population", "10000",
        "--approaches", "census,zt", "--models", "nnc", "--out", report.to_str().unwrap(),
    ]);
    assert!(st.status.success(), "{}", String::from_utf8_lossy(&st.stderr));
    let text = fs::read_to_string(&report).unwrap();
    assert!(text.lines().count() > 4);
}
