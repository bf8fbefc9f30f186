use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use promptor::orchestrator::PipelineConfig;
use promptor::report::correlate;
use promptor::scenarios;
use promptor::trace::{canonicalize, ExecutionTrace};

fn promptor(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_promptor")).args(args).output().expect("binary runs")
}

fn write_config(dir: &Path, name: &str, cfg: &PipelineConfig) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, serde_json::to_string(cfg).unwrap()).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn run_to(dir: &Path, config: &Path, tag: &str, extra: &[&str]) -> (PathBuf, PathBuf) {
    let trace = dir.join(format!("{tag}.jsonl"));
    let report = dir.join(format!("{tag}.txt"));
    let mut args = vec!["run", "--config", s(config), "--trace", s(&trace), "--out", s(&report)];
    args.extend_from_slice(extra);
    let out = promptor(&args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    (trace, report)
}

#[test]
fn run_twice_with_same_seed_gives_identical_traces() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "happy.json", &scenarios::happy_path());
    let (a, _) = run_to(dir.path(), &config, "a", &["--seed", "7"]);
    let (b, _) = run_to(dir.path(), &config, "b", &["--seed", "7"]);
    let a = std::fs::read_to_string(a).unwrap();
    let b = std::fs::read_to_string(b).unwrap();
    assert_eq!(canonicalize(&a).unwrap(), canonicalize(&b).unwrap());
}

#[test]
fn replay_reproduces_the_run_report() {
    let dir = tempfile::tempdir().unwrap();
    for (name, cfg) in [("happy", scenarios::happy_path()), ("failure", scenarios::permanent_failure())] {
        let config = write_config(dir.path(), &format!("{name}.json"), &cfg);
        let (trace, report) = run_to(dir.path(), &config, name, &["--seed", "7"]);
        let replayed = promptor(&["replay", "--trace", s(&trace)]);
        assert!(replayed.status.success());
        assert_eq!(replayed.stdout, std::fs::read(&report).unwrap());
        let rendered = promptor(&["report", "--trace", s(&trace)]);
        assert_eq!(rendered.stdout, replayed.stdout);
    }
}

#[test]
fn flags_override_the_config_and_land_in_the_header() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "happy.json", &scenarios::happy_path());
    let args =
        ["--disable", "reviewer", "--disable", "plan-updater", "--metric", "kl", "--tau", "0.6", "--samples", "3"];
    let (trace, _) = run_to(dir.path(), &config, "t", &args);
    let trace = ExecutionTrace::read(&trace).unwrap();
    let cfg = &trace.header.config;
    assert!(!cfg.toggles.reviewer);
    assert!(!cfg.toggles.plan_updater);
    assert!(cfg.toggles.subtask_optimizer);
    assert_eq!(cfg.refinement.tau, 0.6);
    assert_eq!(cfg.refinement.sample_count, 3);
    assert_eq!(serde_json::to_value(cfg.toggles.metric).unwrap(), "kl");
}

#[test]
fn exit_codes_are_distinct() {
    let dir = tempfile::tempdir().unwrap();
    let code = |args: &[&str]| promptor(args).status.code().unwrap();

    assert_eq!(code(&["frobnicate"]), 64);
    assert_eq!(code(&["run"]), 64);
    assert_eq!(code(&["--help"]), 0);

    let missing = dir.path().join("missing.json");
    assert_eq!(code(&["run", "--config", s(&missing)]), 2);
    let garbage = dir.path().join("garbage.json");
    std::fs::write(&garbage, "{ not json").unwrap();
    assert_eq!(code(&["run", "--config", s(&garbage)]), 2);
    let happy = write_config(dir.path(), "happy.json", &scenarios::happy_path());
    assert_eq!(code(&["run", "--config", s(&happy), "--tau", "1.5"]), 2);

    let mut http = scenarios::happy_path();
    let mut embedder = serde_json::to_value(&http.embedder).unwrap();
    embedder["kind"] = "http".into();
    embedder["endpoint_url"] = "http://127.0.0.1:9/v1".into();
    embedder["model_name"] = "stub".into();
    embedder["max_retries"] = 0.into();
    embedder["timeout_ms"] = 500.into();
    http.embedder = serde_json::from_value(embedder).unwrap();
    let http = write_config(dir.path(), "http.json", &http);
    assert_eq!(code(&["run", "--config", s(&http), "--trace", s(&dir.path().join("h.jsonl"))]), 3);

    let bad = dir.path().join("bad.jsonl");
    std::fs::write(&bad, "not a trace\n").unwrap();
    assert_eq!(code(&["replay", "--trace", s(&bad)]), 4);
    assert_eq!(code(&["report", "--trace", s(&bad)]), 4);

    let (trace, _) = run_to(dir.path(), &happy, "ok", &[]);
    let text = std::fs::read_to_string(&trace).unwrap();
    let truncated: Vec<&str> = text.lines().collect();
    let cut = dir.path().join("cut.jsonl");
    std::fs::write(&cut, truncated[..truncated.len() - 1].join("\n")).unwrap();
    assert_eq!(code(&["report", "--trace", s(&cut)]), 4);

    let help = String::from_utf8(promptor(&["--help"]).stdout).unwrap();
    for needle in ["2   configuration error", "3   backend error", "4   malformed trace", "64  usage error"] {
        assert!(help.contains(needle), "{needle}");
    }
}

#[test]
fn correlate_reads_a_directory_of_traces() {
    let dir = tempfile::tempdir().unwrap();
    let traces_dir = dir.path().join("traces");
    std::fs::create_dir(&traces_dir).unwrap();
    let mut traces = Vec::new();
    for (i, cfg) in scenarios::correlation_suite().iter().enumerate() {
        let config = write_config(dir.path(), &format!("c{i}.json"), cfg);
        let (trace, _) = run_to(&traces_dir, &config, &format!("run{i}"), &[]);
        traces.push(ExecutionTrace::read(&trace).unwrap());
    }
    let out = promptor(&["correlate", "--trace", s(&traces_dir), "--json"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let body: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let expected = correlate(&traces).unwrap();
    assert_eq!(body["n"], 200);
    assert_eq!(body["r"].as_f64().unwrap(), expected.r);
    assert!(expected.r > 0.5);
}

#[test]
fn simulate_bound_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("sim.json");
    std::fs::write(
        &config,
        r#"{"models": [{"family": "gaussian", "mean": 0.0, "variance": 1.0}],
            "u": [1.0], "v": [1.0], "epsilons": [2.0], "trials": 1000, "seed": 3}"#,
    )
    .unwrap();
    let csv = dir.path().join("out.csv");
    let out = promptor(&["simulate-bound", "--config", s(&config), "--trials", "40000", "--out", s(&csv)]);
    assert!(out.status.success());
    let text = std::fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("n,epsilon,analytic_bound,empirical_tail,trials,seed"));
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(row[0], "1");
    assert!((row[2].parse::<f64>().unwrap() - 2.0 * (-2.0f64).exp()).abs() < 1e-12);
    assert!((row[3].parse::<f64>().unwrap() - 0.0455).abs() < 0.01);
    assert_eq!(row[4], "40000");
}

#[test]
fn eval_stability_scores_a_prompt_file() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = PipelineConfig::new("Sum the rows.");
    cfg.script = Some(serde_json::from_value(serde_json::json!({"behaviors": [
        {"match": {"contains-all": ["Sum the rows."]}, "outcomes": [{"text": "7", "probability": 1.0}], "seed": 0, "mode": "weighted"}
    ]})).unwrap());
    let config = write_config(dir.path(), "eval.json", &cfg);
    let prompt = dir.path().join("prompt.json");
    std::fs::write(
        &prompt,
        r#"{"role": "Analyst.", "requirements": ["Sum the rows."], "io_spec": {"output_format": "numeric"}}"#,
    )
    .unwrap();
    let trace = dir.path().join("eval.jsonl");
    let out = promptor(&[
        "eval-stability",
        "--config",
        s(&config),
        "--prompt",
        s(&prompt),
        "--samples",
        "4",
        "--trace",
        s(&trace),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let body: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(body["score"]["value"].as_f64().unwrap(), 1.0);
    assert_eq!(body["stable"], true);
    assert_eq!(body["samples"].as_array().unwrap().len(), 4);
    assert!(ExecutionTrace::read(&trace).is_ok());

    std::fs::write(&prompt, r#"{"role": ""}"#).unwrap();
    assert_eq!(promptor(&["eval-stability", "--config", s(&config), "--prompt", s(&prompt)]).status.code(), Some(2));
}
