use std::path::PathBuf;
use std::process::{Command, Output};

use serde_json::Value;

fn data(name: &str) -> String {
    let p: PathBuf = [env!("CARGO_MANIFEST_DIR"), "..", "..", "data", name].iter().collect();
    p.to_string_lossy().into_owned()
}

fn mixsel(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mixsel"))
        .args(args)
        .env_remove("MIXSEL_THREADS")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout.clone()).unwrap()
}

#[test]
fn caic_json_has_exactly_the_documented_keys() {
    let ss = data("sleepstudy.csv");
    let o = mixsel(&["caic", "--data", &ss, "--formula", "Reaction ~ Days + (Days | Subject)", "--format", "json"]);
    let text = stdout(&o);
    let v: Value = serde_json::from_str(&text).unwrap();
    let mut keys: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
    keys.sort_unstable();
    assert_eq!(keys, ["caic", "df", "loglikelihood", "newFit", "reducedFormula"]);
    assert!((v["caic"].as_f64().unwrap() - 1711.618).abs() < 0.05);
    assert!((v["loglikelihood"].as_f64().unwrap() + 824.507).abs() < 0.02);
    assert_eq!(v["newFit"], Value::Bool(false));
    assert_eq!(v["reducedFormula"], Value::Null);
    // re-serializing the parsed document gives the same value
    let again: Value = serde_json::from_str(&serde_json::to_string(&v).unwrap()).unwrap();
    assert_eq!(again, v);
}

#[test]
fn caic_table_prints_named_sections() {
    let o = mixsel(&["caic", "--data", &data("pastes.csv"), "--formula", "strength ~ (1 | sample)"]);
    let text = stdout(&o);
    assert!(text.contains("$caic\n[1] 178.1981"), "{text}");
}

#[test]
fn linear_model_is_not_refitted() {
    let o = mixsel(&["caic", "--data", &data("pastes.csv"), "--formula", "strength ~ 1", "--format", "json"]);
    let v: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["newFit"], Value::Bool(false));
    assert!((v["caic"].as_f64().unwrap() - 312.2727).abs() < 0.05);
}

#[test]
fn fit_summary_reports_criterion_and_components() {
    let ss = data("sleepstudy.csv");
    let text = stdout(&mixsel(&["fit", "--data", &ss, "--formula", "Reaction ~ Days + (Days | Subject)"]));
    assert!(text.contains("REML criterion at convergence: 1743.628"), "{text}");
    assert!(text.contains("groups:  Subject, 18"));
    let o = mixsel(&["fit", "--data", &ss, "--formula", "Reaction ~ Days + (1 | Subject) + (0 + Days | Subject)", "--format", "json"]);
    let v: Value = serde_json::from_str(&stdout(&o)).unwrap();
    let sds: Vec<f64> = v["randomEffects"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r["sds"][0].as_f64().unwrap())
        .collect();
    assert!((sds[0] - 25.051).abs() < 0.01 && (sds[1] - 5.988).abs() < 0.01, "{sds:?}");
    assert!((v["residualSd"].as_f64().unwrap() - 25.565).abs() < 0.01);
}

#[test]
fn fit_groups_line_for_poisson_model() {
    let o = mixsel(&[
        "fit",
        "--data",
        &data("grouseticks.csv"),
        "--formula",
        "TICKS ~ YEAR + HEIGHT + (1 | BROOD) + (1 | INDEX) + (1 | LOCATION)",
        "--family",
        "poisson",
    ]);
    let text = stdout(&o);
    assert!(text.contains("INDEX, 403; BROOD, 118; LOCATION, 63"), "{text}");
}

#[test]
fn step_prints_trace_and_best_model() {
    let o = mixsel(&["step", "--data", &data("pastes.csv"), "--formula", "strength ~ 1 + (1 | sample) + (1 | batch)", "--trace"]);
    let text = stdout(&o);
    assert!(text.contains("Best model:  ~ (1 | sample) , cAIC: 178.1981"), "{text}");
    assert!(text.contains("-155.13635"));
    assert!(text.contains("312.2727"));
    assert_eq!(text.matches("Step ").count(), 2);
}

#[test]
fn step_json_is_identical_across_thread_counts() {
    let pastes = data("pastes.csv");
    let run = |threads: &str| {
        stdout(&mixsel(&[
            "step",
            "--data",
            &pastes,
            "--formula",
            "strength ~ 1",
            "--direction",
            "forward",
            "--group-candidates",
            "batch,sample",
            "--threads",
            threads,
            "--format",
            "json",
        ]))
    };
    let one = run("1");
    assert_eq!(one, run("4"));
    let v: Value = serde_json::from_str(&one).unwrap();
    assert_eq!(v["trace"]["best_formula"], "~ (1 | sample)");
}

#[test]
fn step_without_candidates_stops_immediately() {
    let o = mixsel(&["step", "--data", &data("pastes.csv"), "--formula", "strength ~ 1", "--format", "json"]);
    let v: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["trace"]["stop_reason"], "no-candidates");
    assert_eq!(v["trace"]["steps"].as_array().unwrap().len(), 1);
}

#[test]
fn exit_codes() {
    let missing = mixsel(&["caic", "--data", "/nonexistent.csv", "--formula", "y ~ 1"]);
    assert_eq!(missing.status.code(), Some(2));
    let pastes = data("pastes.csv");
    let bad_formula = mixsel(&["caic", "--data", &pastes, "--formula", "strength ~ (1 |"]);
    assert_eq!(bad_formula.status.code(), Some(2));
    let bad_family = mixsel(&["caic", "--data", &pastes, "--formula", "strength ~ 1", "--family", "gamma"]);
    assert_eq!(bad_family.status.code(), Some(2));
    let usage = mixsel(&["caic"]);
    assert_eq!(usage.status.code(), Some(2));

    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty.csv");
    std::fs::write(&empty, "y,g\n").unwrap();
    let o = mixsel(&["fit", "--data", empty.to_str().unwrap(), "--formula", "y ~ 1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("no data rows"));

    let exact = dir.path().join("exact.csv");
    std::fs::write(&exact, "y,x,g\n1,1,a\n2,2,a\n3,3,b\n4,4,b\n5,5,c\n6,6,c\n").unwrap();
    let o = mixsel(&["caic", "--data", exact.to_str().unwrap(), "--formula", "y ~ x + (1 | g)"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn thread_count_from_environment_is_validated() {
    let o = Command::new(env!("CARGO_BIN_EXE_mixsel"))
        .args(["caic", "--data", &data("pastes.csv"), "--formula", "strength ~ 1"])
        .env("MIXSEL_THREADS", "0")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}
