use std::path::PathBuf;
use std::process::{Command, Output};

fn viewroute(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_viewroute"))
        .args(args)
        .output()
        .unwrap()
}

fn fixture(name: &str) -> String {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../core/tests/fixtures")
        .join(name)
        .to_string_lossy()
        .into_owned()
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(viewroute(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(viewroute(&["eval", "--run", "x"]).status.code(), Some(2));
    let o = viewroute(&[
        "eval",
        "--run",
        &fixture("fixture.run"),
        "--qrels",
        &fixture("fixture.qrels"),
        "--set",
        "search.nope=1",
    ]);
    assert_eq!(o.status.code(), Some(2));
    let o = viewroute(&[
        "eval",
        "--run",
        "/no/such/file",
        "--qrels",
        &fixture("fixture.qrels"),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("--run"));
}

#[test]
fn eval_prints_fixture_metrics_and_effective_config() {
    let dir = tempfile::tempdir().unwrap();
    let json = dir.path().join("m.json");
    let o = viewroute(&[
        "eval",
        "--run",
        &fixture("fixture.run"),
        "--qrels",
        &fixture("fixture.qrels"),
        "--seed",
        "4",
        "--out",
        json.to_str().unwrap(),
    ]);
    assert!(o.status.success());
    let out = String::from_utf8(o.stdout).unwrap();
    let mrr = (1.0 / 3.0 + 1.0 + 0.0 + 0.1 + 0.5) / 5.0;
    assert!(out.lines().any(|l| l == format!("mrr@10={mrr}")), "{out}");
    let err = String::from_utf8(o.stderr).unwrap();
    assert!(err.contains("seed: 4"), "{err}");
    let v: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(json).unwrap()).unwrap();
    assert_eq!(v["mrr@10"].as_f64(), Some(mrr));
}

#[test]
fn environment_sits_below_flags() {
    let run = fixture("fixture.run");
    let qrels = fixture("fixture.qrels");
    let o = Command::new(env!("CARGO_BIN_EXE_viewroute"))
        .args([
            "eval",
            "--run",
            &run,
            "--qrels",
            &qrels,
            "--metrics",
            "mrr@10",
        ])
        .env("VIEWROUTE_EVAL__METRICS", "[\"ndcg@10\"]")
        .env("VIEWROUTE_SEED", "9")
        .output()
        .unwrap();
    assert!(o.status.success());
    let out = String::from_utf8(o.stdout).unwrap();
    assert!(
        out.contains("mrr@10=") && !out.contains("ndcg@10="),
        "{out}"
    );
    assert!(String::from_utf8(o.stderr).unwrap().contains("seed: 9"));
}
