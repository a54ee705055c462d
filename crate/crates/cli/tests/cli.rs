use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use incident_align::cot::parse_cot;
use incident_align::policy::{Checkpoint, ToyPolicy};
use incident_align::reward::reward_struct;
use incident_align::synthetic::TagEmissionTask;
use serde_json::{json, Value};
use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_incident-align"))
}

fn run(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn report(o: &Output) -> Value {
    serde_json::from_slice(&o.stdout).unwrap_or_else(|e| {
        panic!(
            "stdout is not a report ({e}): {}\nstderr: {}",
            String::from_utf8_lossy(&o.stdout),
            String::from_utf8_lossy(&o.stderr)
        )
    })
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn read(dir: &Path, name: &str) -> String {
    fs::read_to_string(dir.join(name)).unwrap()
}

#[test]
fn gen_synthetic_cases() {
    let d = TempDir::new().unwrap();
    let dir = d.path();
    let o = run(
        dir,
        &[
            "gen-synthetic",
            "--task",
            "tag-emission",
            "--count",
            "0",
            "--out",
            "empty.jsonl",
        ],
    );
    assert_eq!(code(&o), 0);
    assert_eq!(read(dir, "empty.jsonl"), "");

    let o = run(
        dir,
        &[
            "gen-synthetic",
            "--task",
            "tag-emission",
            "--count",
            "12",
            "--seed",
            "5",
            "--out",
            "a.jsonl",
        ],
    );
    assert_eq!(code(&o), 0);
    let rep = report(&o);
    assert_eq!(rep["seed"], 5);
    assert_eq!(rep["config"]["task"], "tag-emission");
    let text = read(dir, "a.jsonl");
    assert_eq!(text.lines().count(), 12);
    for line in text.lines() {
        let v: Value = serde_json::from_str(line).unwrap();
        assert_eq!(reward_struct(&parse_cot(v["text"].as_str().unwrap())), 4);
    }
    run(
        dir,
        &[
            "gen-synthetic",
            "--task",
            "tag-emission",
            "--count",
            "12",
            "--seed",
            "5",
            "--out",
            "b.jsonl",
        ],
    );
    assert_eq!(read(dir, "b.jsonl"), text);

    let o = run(dir, &["gen-synthetic", "--task", "nope", "--out", "x.jsonl"]);
    assert_eq!(code(&o), 2);
}

fn score_fixture(dir: &Path) {
    let vocab = json!([
        {"stage": 1, "term": "multi-vehicle pileup", "weight": 1.0},
        {"stage": 2, "term": "chain reaction", "weight": 1.0},
        {"stage": 3, "term": "remote diversion", "weight": 1.0},
        {"stage": 4, "term": "residual congestion", "weight": 1.0}
    ]);
    write(dir, "vocab.json", &vocab.to_string());
    let words = vec!["<unk>", "fog", "pileup", "[Incident Description]", "[Causal Inference]"];
    let m = ToyPolicy::uniform(words.len(), 2).unwrap();
    let model = json!({"words": words, "unknown": "<unk>", "vocab_size": m.vocab_size, "order": 2, "logits": m.logits});
    write(dir, "ref.json", &model.to_string());
    write(
        dir,
        "store.jsonl",
        "{\"text\": \"initiate remote diversion and watch residual congestion\"}\n{\"text\": \"close the ramp\"}\n",
    );
}

const COTS: &str = concat!(
    "{\"text\": \"[Incident Description] multi-vehicle pileup in fog [Causal Inference] chain reaction ",
    "[Response Strategy Formulation] remote diversion [Strategy Evaluation] residual congestion\"}\n",
    "{\"text\": \"no tags at all\"}\n",
    "{\"text\": \"[Causal Inference] x [Incident Description] y\"}\n",
);

fn score_args<'a>(input: &'a str, out: &'a str) -> Vec<&'a str> {
    vec![
        "score-cot",
        "--input",
        input,
        "--vocab",
        "vocab.json",
        "--ref-model",
        "ref.json",
        "--ref-store",
        "store.jsonl",
        "--out",
        out,
    ]
}

#[test]
fn score_cot_lines_and_determinism() {
    let d = TempDir::new().unwrap();
    let dir = d.path();
    score_fixture(dir);
    write(dir, "in.jsonl", COTS);
    let o = run(dir, &score_args("in.jsonl", "s1.jsonl"));
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let out = read(dir, "s1.jsonl");
    let rows: Vec<Value> = out.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(rows.len(), 3);
    assert_eq!(rows[0]["r_struct"], 4);
    assert_eq!(rows[1]["r_struct"], 0);
    assert_eq!(rows[2]["r_struct"], 0);
    assert_eq!(
        rows.iter().map(|r| r["line"].as_u64().unwrap()).collect::<Vec<_>>(),
        vec![1, 2, 3]
    );
    assert_eq!(report(&o)["config"]["reward"]["lambda_struct"], 0.25);

    let again = run(dir, &score_args("in.jsonl", "s2.jsonl"));
    assert_eq!(read(dir, "s2.jsonl"), out);
    assert_eq!(again.stdout, run(dir, &score_args("in.jsonl", "s2.jsonl")).stdout);
}

#[test]
fn score_cot_empty_and_malformed_input() {
    let d = TempDir::new().unwrap();
    let dir = d.path();
    score_fixture(dir);
    write(dir, "empty.jsonl", "");
    let o = run(dir, &score_args("empty.jsonl", "e.jsonl"));
    assert_eq!(code(&o), 0);
    assert_eq!(read(dir, "e.jsonl"), "");

    write(
        dir,
        "bad.jsonl",
        &format!("{COTS}not json\n{{\"text\": \"[Incident Description] ok\"}}\n"),
    );
    let o = run(dir, &score_args("bad.jsonl", "b.jsonl"));
    assert_eq!(code(&o), 1);
    assert_eq!(read(dir, "b.jsonl").lines().count(), 4);
    let rep = report(&o);
    assert_eq!(rep["skipped"][0]["line"], 4);
    assert!(String::from_utf8_lossy(&o.stderr).contains("bad.jsonl:4"));

    let mut strict = score_args("bad.jsonl", "strict.jsonl");
    strict.push("--strict");
    let o = run(dir, &strict);
    assert_eq!(code(&o), 1);
    assert!(!dir.join("strict.jsonl").exists());
}

#[test]
fn score_cot_config_overrides_and_rejects_unknown_keys() {
    let d = TempDir::new().unwrap();
    let dir = d.path();
    score_fixture(dir);
    write(dir, "in.jsonl", COTS);
    write(dir, "cfg.json", r#"{"reward": {"lambda_struct": 1.0, "tau_ppl": 3.0}}"#);
    let mut args = score_args("in.jsonl", "c.jsonl");
    args.extend(["--config", "cfg.json"]);
    let o = run(dir, &args);
    assert_eq!(code(&o), 0);
    assert_eq!(report(&o)["config"]["reward"]["tau_ppl"], 3.0);

    write(dir, "typo.json", r#"{"reward": {"lambda_strct": 1.0}}"#);
    let mut args = score_args("in.jsonl", "c.jsonl");
    args.extend(["--config", "typo.json"]);
    assert_eq!(code(&run(dir, &args)), 2);
}

#[test]
fn missing_input_is_io_error() {
    let d = TempDir::new().unwrap();
    let o = run(d.path(), &["kg", "query", "--graph", "absent.json", "--query", "fog"]);
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8_lossy(&o.stderr).contains("absent.json"));
}

fn train(dir: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train-grpo", "--seed", "3", "--eval-samples", "1"];
    args.extend_from_slice(extra);
    run(dir, &args)
}

#[test]
fn train_zero_epochs_keeps_initial_model() {
    let d = TempDir::new().unwrap();
    let dir = d.path();
    write(dir, "cfg.json", r#"{"grpo": {"epochs": 0}}"#);
    let o = train(
        dir,
        &["--config", "cfg.json", "--out", "ck.json", "--metrics", "m.jsonl"],
    );
    assert_eq!(code(&o), 0);
    let ck: Checkpoint = serde_json::from_str(&read(dir, "ck.json")).unwrap();
    let task = TagEmissionTask::new();
    assert_eq!(ck.policy().unwrap(), ToyPolicy::uniform(task.vocab_size(), 2).unwrap());
    assert_eq!(read(dir, "m.jsonl"), "");
}

#[test]
fn train_is_reproducible_and_resumable() {
    let d = TempDir::new().unwrap();
    let dir = d.path();
    write(dir, "cfg.json", r#"{"grpo": {"epochs": 6, "group_size": 4}}"#);
    let full = train(
        dir,
        &["--config", "cfg.json", "--out", "full.json", "--metrics", "full.jsonl"],
    );
    assert_eq!(code(&full), 0);
    let again = train(
        dir,
        &[
            "--config",
            "cfg.json",
            "--out",
            "again.json",
            "--metrics",
            "again.jsonl",
        ],
    );
    assert_eq!(read(dir, "full.json"), read(dir, "again.json"));
    assert_eq!(read(dir, "full.jsonl"), read(dir, "again.jsonl"));
    assert_eq!(read(dir, "full.jsonl").lines().count(), 6);
    let (a, b) = (report(&full), report(&again));
    assert_eq!(a["config"], b["config"]);
    assert_eq!(a["config"]["grpo"]["kl_coefficient"], 0.04);

    let first = train(
        dir,
        &[
            "--config",
            "cfg.json",
            "--until",
            "3",
            "--out",
            "part.json",
            "--metrics",
            "part.jsonl",
        ],
    );
    assert_eq!(code(&first), 0);
    let second = train(
        dir,
        &[
            "--config",
            "cfg.json",
            "--resume",
            "part.json",
            "--out",
            "rest.json",
            "--metrics",
            "part.jsonl",
        ],
    );
    assert_eq!(code(&second), 0);
    assert_eq!(report(&second)["outputs"]["start_epoch"], 3);
    assert_eq!(read(dir, "rest.json"), read(dir, "full.json"));
    assert_eq!(read(dir, "part.jsonl"), read(dir, "full.jsonl"));
}

#[test]
fn train_rejects_unknown_preset() {
    let d = TempDir::new().unwrap();
    let o = train(
        d.path(),
        &["--preset", "huge", "--out", "ck.json", "--metrics", "m.jsonl"],
    );
    assert_eq!(code(&o), 2);
}

#[test]
fn kg_index_query_merge() {
    let d = TempDir::new().unwrap();
    let dir = d.path();
    run(
        dir,
        &[
            "gen-synthetic",
            "--task",
            "kg-corpus",
            "--count",
            "20",
            "--seed",
            "2",
            "--out",
            "docs.jsonl",
        ],
    );
    let o = run(dir, &["kg", "index", "--corpus", "docs.jsonl", "--out", "g.json"]);
    assert_eq!(code(&o), 0);
    let graph = read(dir, "g.json");
    let again = run(dir, &["kg", "index", "--corpus", "docs.jsonl", "--out", "g.json"]);
    assert_eq!(read(dir, "g.json"), graph);
    assert_eq!(o.stdout, again.stdout);

    let g: Value = serde_json::from_str(&graph).unwrap();
    let key = g["nodes"][0]["key"].as_str().unwrap().to_string();
    let o = run(dir, &["kg", "query", "--graph", "g.json", "--query", &key]);
    assert_eq!(code(&o), 0);
    let hits = &report(&o)["outputs"]["results"][0]["node_hits"];
    assert_eq!(hits[0]["key"], key.as_str());

    write(dir, "empty.jsonl", "");
    run(dir, &["kg", "index", "--corpus", "empty.jsonl", "--out", "empty.json"]);
    let o = run(
        dir,
        &[
            "kg",
            "merge",
            "--graph",
            "g.json",
            "--with",
            "empty.json",
            "--out",
            "merged.json",
        ],
    );
    assert_eq!(code(&o), 0);
    assert_eq!(read(dir, "merged.json"), graph);
    run(
        dir,
        &[
            "kg",
            "merge",
            "--graph",
            "g.json",
            "--with",
            "g.json",
            "--out",
            "self.json",
        ],
    );
    assert_eq!(read(dir, "self.json"), graph);

    write(dir, "small.json", r#"{"graph": {"embedding_dim": 32}}"#);
    run(
        dir,
        &[
            "kg",
            "index",
            "--corpus",
            "empty.jsonl",
            "--config",
            "small.json",
            "--out",
            "small-g.json",
        ],
    );
    let o = run(
        dir,
        &[
            "kg",
            "merge",
            "--graph",
            "g.json",
            "--with",
            "small-g.json",
            "--out",
            "x.json",
        ],
    );
    assert_eq!(code(&o), 2);
}

#[test]
fn fusion_check_pass_fail_and_determinism() {
    let d = TempDir::new().unwrap();
    let dir = d.path();
    let args = ["fusion-check", "--seed", "9", "--instances", "10"];
    let a = run(dir, &args);
    assert_eq!(code(&a), 0, "{}", String::from_utf8_lossy(&a.stdout));
    assert_eq!(report(&a)["outputs"]["passed"], true);
    assert_eq!(run(dir, &args).stdout, a.stdout);

    let bad = run(
        dir,
        &[
            "fusion-check",
            "--seed",
            "9",
            "--instances",
            "3",
            "--inject-fault",
            "--out",
            "fail.json",
        ],
    );
    assert_eq!(code(&bad), 1);
    let fixture: Value = serde_json::from_str(&read(dir, "fail.json")).unwrap();
    assert_eq!(fixture["index"], 0);
    assert!(fixture["input"]["data"].is_array());

    assert_eq!(code(&run(dir, &["fusion-check", "--head-dim", "7"])), 2);
}

#[test]
fn unknown_config_section_is_usage_error() {
    let d = TempDir::new().unwrap();
    let dir = d.path();
    write(dir, "cfg.json", r#"{"rewards": {}}"#);
    let o = run(
        dir,
        &[
            "gen-synthetic",
            "--task",
            "kg-corpus",
            "--config",
            "cfg.json",
            "--out",
            "x.jsonl",
        ],
    );
    assert_eq!(code(&o), 2);
}
