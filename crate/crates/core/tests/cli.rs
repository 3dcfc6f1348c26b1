use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::Value;
use tempfile::TempDir;
use ucmoa::labeler::write_jsonl;
use ucmoa::policy_sim::{generate_offline_dataset, SynthEnv};

fn ucmoa(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ucmoa"))
        .args(args)
        .current_dir(dir)
        .env_remove("UCMOA_SEED")
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = ucmoa(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// Work directory with a quick config (few sweeps, small datasets).
fn workspace(extra: &str) -> TempDir {
    let tmp = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let samples = generate_offline_dataset(&SynthEnv::bundled_two_objective(), 120, &mut rng).unwrap();
    write_jsonl(fs::File::create(tmp.path().join("input.jsonl")).unwrap(), &samples).unwrap();
    let config = format!(
        r#"{{"ensemble": {{"steps": 40}},
            "simulator": {{"n_offline": 400, "offline_epochs": 100, "n_stat": 20,
                           "online": {{"n_generate": 300, "epochs": 100}}}},
            "metrics": {{"m": 20, "n_responses": 40, "n_consistency": 60, "n_preferences": 10}},
            "paths": {{"out": "out"}}{extra}}}"#
    );
    fs::write(tmp.path().join("config.json"), config).unwrap();
    tmp
}

fn read_csv(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header = r.headers().unwrap().iter().map(String::from).collect();
    let rows = r.records().map(|rec| rec.unwrap().iter().map(String::from).collect()).collect();
    (header, rows)
}

#[test]
fn default_config_trains_ten_members() {
    let tmp = workspace("");
    ok(tmp.path(), &["--config", "config.json", "train-utilities"]);
    let doc: Value = serde_json::from_str(&fs::read_to_string(tmp.path().join("out/ensemble.json")).unwrap()).unwrap();
    assert_eq!(doc["k"], 2);
    assert_eq!(doc["epsilon"], 0.01);
    assert_eq!(doc["nets"].as_array().unwrap().len(), 10);
    let (header, rows) = read_csv(&tmp.path().join("out/train_log.csv"));
    assert_eq!(header, ["step", "member", "l_val", "l_grad", "objective"]);
    assert_eq!(rows.len(), 40 * 10);
}

#[test]
fn configuration_errors_exit_with_one() {
    let tmp = workspace("");
    fs::write(tmp.path().join("one.json"), r#"{"m_utilities": 1}"#).unwrap();
    let out = ucmoa(tmp.path(), &["--config", "one.json", "train-utilities"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("at least 2 utilities"));

    assert_eq!(ucmoa(tmp.path(), &["--config", "missing.json", "train-utilities"]).status.code(), Some(1));
    assert_eq!(ucmoa(tmp.path(), &["eval", "--metric", "nope"]).status.code(), Some(1));
    assert_eq!(ucmoa(tmp.path(), &["frobnicate"]).status.code(), Some(1));
    let bad_seed = Command::new(env!("CARGO_BIN_EXE_ucmoa"))
        .args(["--config", "config.json", "train-utilities"])
        .current_dir(tmp.path())
        .env("UCMOA_SEED", "abc")
        .output()
        .unwrap();
    assert_eq!(bad_seed.status.code(), Some(1));
}

#[test]
fn missing_artifacts_are_data_errors() {
    let tmp = workspace("");
    let out = ucmoa(tmp.path(), &["--config", "config.json", "infer", "--preference", "0.5,0.5"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn label_writes_records_in_input_order() {
    let tmp = workspace(r#", "seed": 1"#);
    let dir = tmp.path();
    fs::write(
        dir.join("config.json"),
        fs::read_to_string(dir.join("config.json"))
            .unwrap()
            .replace(r#""out": "out""#, r#""out": "out", "input": "input.jsonl""#),
    )
    .unwrap();
    ok(dir, &["--config", "config.json", "train-utilities"]);
    let summary = ok(dir, &["--config", "config.json", "label"]);
    assert!(summary.starts_with("labeled 120 records; histogram a="), "{summary}");
    let total: usize = summary
        .trim()
        .rsplit("histogram ")
        .next()
        .unwrap()
        .split(' ')
        .map(|kv| kv.split('=').nth(1).unwrap().parse::<usize>().unwrap())
        .sum();
    assert_eq!(total, 120);

    let input: Vec<Value> = fs::read_to_string(dir.join("input.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    let labeled: Vec<Value> = fs::read_to_string(dir.join("out/labeled.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(labeled.len(), input.len());
    for (a, b) in input.iter().zip(&labeled) {
        assert_eq!(a["prompt_id"], b["prompt_id"]);
        assert_eq!(a["rewards"], b["rewards"]);
        let i = b["chosen_index"].as_u64().unwrap() as usize;
        let p: Vec<f64> = b["percentiles"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
        assert!(p.iter().all(|v| *v <= p[i]));
        let letter = (b'a' + i as u8) as char;
        assert!(b["augmented_prompt"].as_str().unwrap().ends_with(&format!("<max_utility_idx> {letter}")));
    }
    let snapshot: Value = serde_json::from_str(&fs::read_to_string(dir.join("out/percentiles.json")).unwrap()).unwrap();
    assert_eq!(snapshot["table"]["n"], 120);

    let first = fs::read(dir.join("out/labeled.jsonl")).unwrap();
    ok(dir, &["--config", "config.json", "label"]);
    assert_eq!(fs::read(dir.join("out/labeled.jsonl")).unwrap(), first);
}

#[test]
fn short_reward_record_reports_its_line() {
    let tmp = workspace("");
    let dir = tmp.path();
    ok(dir, &["--config", "config.json", "train-utilities"]);
    let good = r#"{"prompt_id":"a","prompt":"p","response":"r","rewards":[0.1,0.2]}"#;
    let short = r#"{"prompt_id":"b","prompt":"p","response":"r","rewards":[0.1]}"#;
    fs::write(dir.join("bad.jsonl"), format!("{good}\n{good}\n{short}\n")).unwrap();
    fs::write(dir.join("bad.json"), r#"{"ensemble": {"steps": 40}, "paths": {"input": "bad.jsonl"}}"#).unwrap();
    let out = ucmoa(dir, &["--config", "bad.json", "label"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 3") && err.contains("expected 2, got 1"), "{err}");
}

#[test]
fn policy_training_and_evaluation() {
    let tmp = workspace("");
    let dir = tmp.path();
    let cfg = ["--config", "config.json"];
    let with = |extra: &[&str]| -> Vec<String> { cfg.iter().chain(extra).map(|s| s.to_string()).collect() };
    let run = |extra: &[&str]| {
        let args = with(extra);
        ok(dir, &args.iter().map(String::as_str).collect::<Vec<_>>())
    };
    run(&["train-utilities"]);

    run(&["train-policy", "--online-iters", "2"]);
    let (header, rows) = read_csv(&dir.join("out/stats.csv"));
    assert_eq!(&header[..3], ["iter", "accept_rate", "mean_utility_token_0"]);
    assert_eq!(header.len(), 2 + 10);
    assert_eq!(rows.len(), 3);
    for row in &rows {
        let rate: f64 = row[1].parse().unwrap();
        assert!((0.0..=1.0).contains(&rate));
    }

    run(&["train-policy", "--online-iters", "0"]);
    assert_eq!(read_csv(&dir.join("out/stats.csv")).1.len(), 1);
    run(&["eval", "--metric", "pareto"]);
    let (header, rows) = read_csv(&dir.join("out/pareto.csv"));
    assert_eq!(header, ["arm", "preference_0", "preference_1", "token", "reward_0", "reward_1"]);
    assert_eq!(rows.len(), 10);
    let svg = fs::read_to_string(dir.join("out/pareto.svg")).unwrap();
    assert_eq!(svg.matches("<polyline").count(), 1);

    run(&["train-policy"]);
    run(&["eval", "--metric", "pareto"]);
    let svg = fs::read_to_string(dir.join("out/pareto.svg")).unwrap();
    assert_eq!(svg.matches("<polyline").count(), 3);
    assert!(svg.contains("reward 0") && svg.contains("reward 1"));
    let report: Value = serde_json::from_str(&fs::read_to_string(dir.join("out/pareto.json")).unwrap()).unwrap();
    assert_eq!(report["arms"].as_array().unwrap().len(), 3);

    run(&["eval", "--metric", "constraints"]);
    let metrics: Value = serde_json::from_str(&fs::read_to_string(dir.join("out/metrics.json")).unwrap()).unwrap();
    let score = metrics["constraint_satisfaction"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&score));
    assert!(metrics["variance_objective"].is_f64());
    assert_eq!(metrics["m"], 20);
    assert_eq!(metrics["seed"], 0);

    run(&["eval", "--metric", "consistency"]);
    let report: Value = serde_json::from_str(&fs::read_to_string(dir.join("out/consistency.json")).unwrap()).unwrap();
    for entry in report.as_array().unwrap() {
        let means = entry["means"].as_array().unwrap();
        assert_eq!(means.len(), 10);
        assert!(means.iter().all(|m| (0.0..=1.0).contains(&m.as_f64().unwrap())));
    }

    let printed = run(&["infer", "--preference", "0.7,0.3"]);
    let out: Value = serde_json::from_str(printed.trim()).unwrap();
    let index = out["index"].as_u64().unwrap() as u8;
    assert_eq!(out["letter"], ((b'a' + index) as char).to_string());
    assert!(out["prompt"].as_str().unwrap().starts_with("### Prompt: "));
    assert_eq!(out, serde_json::from_str::<Value>(&fs::read_to_string(dir.join("out/infer.json")).unwrap()).unwrap());

    let bad = ucmoa(dir, &["--config", "config.json", "infer", "--preference", "1.5,0"]);
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn seed_sources_change_the_ensemble() {
    let tmp = workspace("");
    let dir = tmp.path();
    let ensemble = |args: &[&str], env: Option<&str>, out: &str| -> Vec<u8> {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_ucmoa"));
        cmd.args(["--config", "config.json", "--out", out]).args(args).current_dir(dir);
        match env {
            Some(v) => cmd.env("UCMOA_SEED", v),
            None => cmd.env_remove("UCMOA_SEED"),
        };
        assert!(cmd.output().unwrap().status.success());
        fs::read(dir.join(out).join("ensemble.json")).unwrap()
    };
    let base = ensemble(&["train-utilities"], None, "a");
    let from_env = ensemble(&["train-utilities"], Some("3"), "b");
    let from_flag = ensemble(&["--seed", "3", "train-utilities"], Some("9"), "c");
    assert_ne!(base, from_env);
    assert_eq!(from_env, from_flag);
}

#[test]
fn custom_environment_file() {
    let tmp = workspace(r#", "k": 3"#);
    let dir = tmp.path();
    fs::write(
        dir.join("env.json"),
        r#"{"k": 3, "styles": [
            {"mean": [1.0, 0.0, 0.0], "stdev": [0.05, 0.05, 0.05]},
            {"mean": [0.0, 1.0, 0.0], "stdev": [0.05, 0.05, 0.05]},
            {"mean": [0.0, 0.0, 1.0], "stdev": [0.05, 0.05, 0.05]}]}"#,
    )
    .unwrap();
    let text = fs::read_to_string(dir.join("config.json"))
        .unwrap()
        .replace(r#""n_stat": 20"#, r#""n_stat": 20, "env": "env.json""#);
    fs::write(dir.join("config.json"), text).unwrap();
    ok(dir, &["--config", "config.json", "train-utilities"]);
    ok(dir, &["--config", "config.json", "train-policy", "--online-iters", "1"]);
    let summary = ok(dir, &["--config", "config.json", "eval", "--metric", "pareto"]);
    assert!(summary.starts_with("pareto sweep"));
    // three objectives: no plot and no hypervolume
    assert!(!dir.join("out/pareto.svg").exists());
    ok(dir, &["--config", "config.json", "infer", "--preference", "0.2,0.9,0.1"]);
}
