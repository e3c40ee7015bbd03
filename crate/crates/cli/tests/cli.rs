//! End-to-end runs of the `contam` binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn data(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../data")
        .join(name)
}

fn contam(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_contam"))
        .args(args)
        .output()
        .expect("binary runs")
}

/// Runs with `--json` into a temp dir and returns the parsed report.
fn report(args: &[&str]) -> Value {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("report.json");
    let mut full: Vec<&str> = args.to_vec();
    let p = path.to_str().unwrap().to_string();
    full.extend(["--json", &p]);
    let out = contam(&full);
    assert!(
        out.status.success(),
        "exit {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    let text = std::fs::read_to_string(&path).unwrap();
    validate(&text);
    serde_json::from_str(&text).unwrap()
}

fn validate(text: &str) {
    let schema: Value =
        serde_json::from_str(include_str!("../schema/run_report.schema.json")).unwrap();
    let instance: Value = serde_json::from_str(text).unwrap();
    let validator = jsonschema::validator_for(&schema).expect("schema compiles");
    let errors: Vec<String> = validator
        .iter_errors(&instance)
        .map(|e| format!("{} at {}", e, e.instance_path))
        .collect();
    assert!(errors.is_empty(), "schema violations: {errors:#?}");
}

fn vector(v: &Value) -> Vec<f64> {
    v.as_array()
        .unwrap()
        .iter()
        .map(|x| x.as_f64().unwrap())
        .collect()
}

fn two_school_args(path: &str) -> Vec<&str> {
    vec![
        "--data",
        path,
        "--outcome",
        "outcome",
        "--treatment",
        "treatment",
        "--control",
        "stratum",
        "--control-arm",
        "control",
    ]
}

fn constant_args(path: &str) -> Vec<&str> {
    vec![
        "--data",
        path,
        "--outcome",
        "score",
        "--treatment",
        "class_type",
        "--control",
        "school:categorical",
        "--control-arm",
        "regular",
        "--arms",
        "small,aide",
    ]
}

#[test]
fn decompose_enumerated_two_school() {
    let path = data("two_school_enumerated.csv");
    let mut args = vec!["decompose"];
    args.extend(two_school_args(path.to_str().unwrap()));
    args.extend(["--bootstrap", "20"]);
    let r = report(&args);
    let res = &r["results"];
    let beta = vector(&res["coefficient"]["estimate"]);
    let own = vector(&res["own_effect"]["estimate"]);
    assert!((beta[0] + 99.0 / 212.0).abs() < 1e-9, "{beta:?}");
    assert!(own[0].abs() < 1e-9);
    assert_eq!(r["input"]["rows"], 200);
    assert_eq!(res["arms"], serde_json::json!(["t1", "t2"]));
}

#[test]
fn constant_effects_have_no_contamination() {
    let path = data("constant_effects.csv");
    let mut args = vec!["decompose"];
    args.extend(constant_args(path.to_str().unwrap()));
    args.extend(["--bootstrap", "0"]);
    let r = report(&args);
    let res = &r["results"];
    for c in vector(&res["contamination"]["estimate"]) {
        assert!(c.abs() < 1e-10);
    }
    assert_eq!(vector(&res["own_effect"]["estimate"]).len(), 2);
    assert!(res["bootstrap"].is_null());
}

#[test]
fn estimate_reports_both_standard_errors() {
    let path = data("constant_effects.csv");
    let mut args = vec!["estimate"];
    args.extend(constant_args(path.to_str().unwrap()));
    let r = report(&args);
    let sets = r["results"]["estimates"].as_array().unwrap();
    assert_eq!(sets.len(), 4);
    for set in sets {
        let beta = vector(&set["beta"]);
        assert!(
            (beta[0] - 2.0).abs() < 1e-10 && (beta[1] + 1.0).abs() < 1e-10,
            "{set}"
        );
        if set["kind"] != "uninteracted" {
            assert_eq!(vector(&set["se_known_pscore"]).len(), 2);
        }
    }
    let common = sets.iter().find(|s| s["kind"] == "common_weights").unwrap();
    assert!(common["se_estimated_pscore"].is_array());

    let mut one = vec!["estimate"];
    one.extend(constant_args(path.to_str().unwrap()));
    one.extend(["--which", "one-at-a-time"]);
    let r = report(&one);
    assert_eq!(r["results"]["estimates"].as_array().unwrap().len(), 1);
}

#[test]
fn oracle_bundled_spec() {
    let spec = data("two_school_spec.json");
    let r = report(&["oracle", "--spec", spec.to_str().unwrap(), "--check"]);
    let strata = r["results"]["strata"].as_array().unwrap();
    let l0 = strata[0]["lambda"][0][1].as_f64().unwrap();
    let l1 = strata[1]["lambda"][0][1].as_f64().unwrap();
    assert!((l0 - 99.0 / 106.0).abs() < 1e-12 && (l1 + 99.0 / 106.0).abs() < 1e-12);
    assert_eq!(r["results"]["check"]["passed"], true);
}

#[test]
fn oracle_identical_strata_give_identity_weights() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.json");
    let stratum = r#"{"mass": 0.25, "p": [0.2, 0.3, 0.5], "mu": [0, 1, 2], "sigma2": [1, 1, 1]}"#;
    std::fs::write(
        &spec,
        format!(r#"{{"strata": [{0}, {0}, {0}, {0}]}}"#, stratum),
    )
    .unwrap();
    let r = report(&["oracle", "--spec", spec.to_str().unwrap()]);
    for s in r["results"]["strata"].as_array().unwrap() {
        let l = &s["lambda"];
        for a in 0..2 {
            for b in 0..2 {
                let want = if a == b { 1.0 } else { 0.0 };
                assert!((l[a][b].as_f64().unwrap() - want).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn oracle_random_spec_check() {
    for seed in ["1", "2", "3"] {
        let r = report(&["oracle", "--random", "--seed", seed, "--check"]);
        let check = &r["results"]["check"];
        assert_eq!(check["passed"], true, "{check}");
    }
}

#[test]
fn simulate_without_noise_is_unbiased() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.json");
    // constant effects and no outcome noise: every estimator hits its target
    std::fs::write(
        &spec,
        r#"{"strata": [
            {"mass": 0.4, "p": [0.5, 0.2, 0.3], "mu": [1, 3, 0], "sigma2": [0, 0, 0]},
            {"mass": 0.6, "p": [0.2, 0.4, 0.4], "mu": [4, 6, 3], "sigma2": [0, 0, 0]}
        ]}"#,
    )
    .unwrap();
    let r = report(&[
        "simulate",
        "--spec",
        spec.to_str().unwrap(),
        "--n",
        "400",
        "--reps",
        "1",
    ]);
    for row in r["results"]["summary"].as_array().unwrap() {
        assert!(row["bias"].as_f64().unwrap().abs() < 1e-9, "{row}");
        assert!(row["sd"].is_null());
    }
}

#[test]
fn simulate_tracks_the_uninteracted_estimand() {
    let spec = data("two_school_spec.json");
    let r = report(&[
        "simulate",
        "--spec",
        spec.to_str().unwrap(),
        "--n",
        "2000",
        "--reps",
        "40",
        "--seed",
        "3",
    ]);
    let row = &r["results"]["summary"][0];
    assert_eq!(row["estimator"], "uninteracted");
    let (bias, sd) = (row["bias"].as_f64().unwrap(), row["sd"].as_f64().unwrap());
    assert!(bias.abs() <= 3.0 * sd / 40f64.sqrt(), "{row}");
}

#[test]
fn identical_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let json = dir.path().join("r.json");
    let csv = dir.path().join("r.csv");
    let path = data("constant_effects.csv");
    let mut args = vec!["decompose"];
    args.extend(constant_args(path.to_str().unwrap()));
    args.extend(["--bootstrap", "30", "--seed", "11"]);
    args.extend([
        "--json",
        json.to_str().unwrap(),
        "--csv",
        csv.to_str().unwrap(),
    ]);
    let first = contam(&args);
    assert!(first.status.success());
    let (j1, c1) = (std::fs::read(&json).unwrap(), std::fs::read(&csv).unwrap());
    let second = contam(&args);
    assert_eq!(first.stdout, second.stdout);
    assert_eq!(j1, std::fs::read(&json).unwrap());
    assert_eq!(c1, std::fs::read(&csv).unwrap());
}

#[test]
fn results_do_not_depend_on_job_count() {
    let path = data("two_school_enumerated.csv");
    let spec = data("two_school_spec.json");
    let mut runs = Vec::new();
    for jobs in ["1", "3"] {
        let mut args = vec!["decompose"];
        args.extend(two_school_args(path.to_str().unwrap()));
        args.extend(["--bootstrap", "40", "--seed", "5", "--jobs", jobs]);
        let d = report(&args);
        let s = report(&[
            "simulate",
            "--spec",
            spec.to_str().unwrap(),
            "--n",
            "300",
            "--reps",
            "6",
            "--jobs",
            jobs,
        ]);
        runs.push((d["results"].clone(), s["results"].clone()));
    }
    assert_eq!(runs[0], runs[1]);
}

#[test]
fn csv_artifacts_are_written() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("scatter.csv");
    let path = data("two_school_enumerated.csv");
    let mut args = vec!["decompose"];
    args.extend(two_school_args(path.to_str().unwrap()));
    args.extend(["--bootstrap", "0", "--csv", csv.to_str().unwrap()]);
    assert!(contam(&args).status.success());
    let text = std::fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "stratum,mass,lambda_1_1,lambda_1_2,lambda_2_1,lambda_2_2,tau_1,tau_2,se_1,se_2"
    );
    assert_eq!(lines.count(), 2);
}

#[test]
fn validation_errors_exit_with_two() {
    let path = data("constant_effects.csv");
    let p = path.to_str().unwrap();
    let out = contam(&[
        "decompose",
        "--data",
        p,
        "--outcome",
        "nope",
        "--treatment",
        "class_type",
        "--control-arm",
        "regular",
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope"));

    let out = contam(&[
        "estimate",
        "--data",
        p,
        "--outcome",
        "score",
        "--treatment",
        "class_type",
        "--control-arm",
        "lecture",
    ]);
    assert_eq!(out.status.code(), Some(2));

    // usage errors from the argument parser share the code
    assert_eq!(contam(&["oracle"]).status.code(), Some(2));

    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("bad.json");
    std::fs::write(
        &spec,
        r#"{"strata": [{"mass": 1.0, "p": [0.5, 0.6], "mu": [0, 0], "sigma2": [1, 1]}]}"#,
    )
    .unwrap();
    let out = contam(&["oracle", "--spec", spec.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("/strata/0/p"));
}

#[test]
fn numerical_failures_exit_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("collinear.csv");
    // the continuous control is constant, so it duplicates the intercept
    let mut text = String::from("y,d,x\n");
    for i in 0..12 {
        text.push_str(&format!("{},{},5\n", i % 5, ["a", "b", "c"][i % 3]));
    }
    std::fs::write(&csv, text).unwrap();
    let out = contam(&[
        "decompose",
        "--data",
        csv.to_str().unwrap(),
        "--outcome",
        "y",
        "--treatment",
        "d",
        "--control",
        "x:continuous",
        "--control-arm",
        "a",
        "--bootstrap",
        "0",
    ]);
    assert_eq!(
        out.status.code(),
        Some(3),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}
