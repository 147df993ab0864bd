//! End-to-end runs of the `rolegraph` binary with the scripted backend.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const QUERY: &str = "Were the directors of Inception and Interstellar the same person?";

struct Workspace {
    dir: TempDir,
}

impl Workspace {
    /// Copies the fixtures into a fresh directory and indexes the corpus.
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let fixtures = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures");
        for name in ["figure_rules.jsonl", "figure_corpus.jsonl", "figure_dataset.jsonl"] {
            fs::copy(fixtures.join(name), dir.path().join(name)).unwrap();
        }
        let ws = Self { dir };
        let out = ws.cmd(&["index", "--corpus", &ws.path("figure_corpus.jsonl")]);
        assert!(out.status.success(), "{}", stderr(&out));
        ws
    }

    fn path(&self, name: &str) -> String {
        self.dir.path().join(name).display().to_string()
    }

    fn file(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn cmd(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_rolegraph"))
            .args(args)
            .env_remove("ROLEGRAPH_GATEWAY_URL")
            .current_dir(self.dir.path())
            .output()
            .unwrap()
    }

    /// Runs with the scripted backend and the figure corpus.
    fn scripted(&self, args: &[&str]) -> Output {
        let rules = self.path("figure_rules.jsonl");
        let corpus = self.path("figure_corpus.jsonl");
        let mut all = vec!["--backend", "scripted", "--rules", &rules, "--corpus", &corpus];
        all.extend_from_slice(args);
        self.cmd(&all)
    }
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

#[test]
fn index_reports_counts() {
    let ws = Workspace::new();
    let out = ws.cmd(&["index", "--corpus", &ws.path("figure_corpus.jsonl")]);
    assert!(stdout(&out).starts_with("indexed 8 documents"), "{}", stdout(&out));
    assert!(ws.file("figure_corpus.jsonl.index.json").exists());
}

#[test]
fn run_prints_answer_and_telemetry() {
    let ws = Workspace::new();
    let out = ws.scripted(&["run", "--query", QUERY]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("answer: Yes"), "{text}");
    assert!(text.contains("retrieval calls: 2"), "{text}");
    assert!(text.contains("retrievals skipped: 1"), "{text}");
}

#[test]
fn no_judge_retrieves_everything() {
    let ws = Workspace::new();
    let text = stdout(&ws.scripted(&["--no-judge", "run", "--query", QUERY]));
    assert!(text.contains("retrievals skipped: 0"), "{text}");
    assert!(text.contains("retrieval calls: 3"), "{text}");
}

#[test]
fn run_writes_trace_and_json() {
    let ws = Workspace::new();
    let traces = ws.path("traces");
    let out = ws.scripted(&["--trace-dir", &traces, "run", "--query", QUERY, "--json"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let printed: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(printed["final_answer"], "Yes");
    let stored = fs::read_to_string(ws.file("traces/query.json")).unwrap();
    assert_eq!(serde_json::from_str::<serde_json::Value>(&stored).unwrap(), printed);
}

#[test]
fn missing_index_is_a_data_error() {
    let ws = Workspace::new();
    fs::remove_file(ws.file("figure_corpus.jsonl.index.json")).unwrap();
    let out = ws.scripted(&["run", "--query", QUERY]);
    assert_eq!(code(&out), 3, "{}", stderr(&out));
}

#[test]
fn remote_backend_without_url_is_a_config_error() {
    let ws = Workspace::new();
    let out = ws.cmd(&["--corpus", &ws.path("figure_corpus.jsonl"), "run", "--query", QUERY]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("ROLEGRAPH_GATEWAY_URL"), "{}", stderr(&out));
}

#[test]
fn unknown_config_key_names_the_key() {
    let ws = Workspace::new();
    fs::write(ws.file("bad.toml"), "[retriever]\ntopk = 3\n").unwrap();
    let out = ws.scripted(&["--config", &ws.path("bad.toml"), "run", "--query", QUERY]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("topk"), "{}", stderr(&out));
}

#[test]
fn config_file_drives_the_run() {
    let ws = Workspace::new();
    fs::write(
        ws.file("run.toml"),
        "[backend]\nkind = \"scripted\"\nrules = \"figure_rules.jsonl\"\n\n[retriever]\ncorpus = \"figure_corpus.jsonl\"\ntop_k = 2\n",
    )
    .unwrap();
    let out = ws.cmd(&["--config", &ws.path("run.toml"), "run", "--query", QUERY]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).contains("passages fetched: 4"), "{}", stdout(&out));
}

#[test]
fn dataset_run_then_eval() {
    let ws = Workspace::new();
    let preds = ws.path("preds.jsonl");
    let out = ws.scripted(&["run", "--dataset", &ws.path("figure_dataset.jsonl"), "--out", &preds]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).contains("items: 1 (1 succeeded, 0 failed)"), "{}", stdout(&out));

    let out = ws.cmd(&["eval", "--results", &preds, "--dataset", &ws.path("figure_dataset.jsonl"), "--by-hops"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("all"), "{text}");
    assert!(text.contains("1.0000"), "{text}");
    assert!(text.contains("2-hop"), "{text}");
}

#[test]
fn eval_id_mismatch_exits_3() {
    let ws = Workspace::new();
    fs::write(ws.file("preds.jsonl"), "{\"id\": \"other\", \"prediction\": \"yes\"}\n").unwrap();
    let out = ws.cmd(&["eval", "--results", &ws.path("preds.jsonl"), "--dataset", &ws.path("figure_dataset.jsonl")]);
    assert_eq!(code(&out), 3);
}

#[test]
fn eval_json_report() {
    let ws = Workspace::new();
    fs::write(ws.file("preds.jsonl"), "{\"id\": \"fig2\", \"prediction\": \"Yes.\"}\n").unwrap();
    let out = ws.cmd(&["eval", "--results", &ws.path("preds.jsonl"), "--dataset", &ws.path("figure_dataset.jsonl"), "--json"]);
    let report: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(report["em"], 1.0);
    assert_eq!(report["f1"], 1.0);
}

#[test]
fn collect_then_validate_is_reproducible() {
    let ws = Workspace::new();
    let dataset = ws.path("figure_dataset.jsonl");
    let mut manifests = Vec::new();
    for run in ["a", "b"] {
        let dir = ws.path(run);
        let out = ws.scripted(&["--alpha", "0.5", "collect", "--dataset", &dataset, "--out-dir", &dir]);
        assert!(out.status.success(), "{}", stderr(&out));
        let out = ws.cmd(&["validate", "--dir", &dir]);
        assert!(out.status.success(), "{}", stderr(&out));
        manifests.push(fs::read_to_string(ws.file(&format!("{run}/manifest.json"))).unwrap());
    }
    assert_eq!(manifests[0], manifests[1]);
    let manifest: serde_json::Value = serde_json::from_str(&manifests[0]).unwrap();
    assert_eq!(manifest["policy"]["alpha"], 0.5);
    assert_eq!(manifest["retained_runs"], 1);
    for role in ["graph_builder", "retrieval_judge", "sub_answer", "summarizer", "new_query", "reasoner"] {
        let a = fs::read(ws.file(&format!("a/{role}.jsonl"))).unwrap();
        let b = fs::read(ws.file(&format!("b/{role}.jsonl"))).unwrap();
        assert_eq!(a, b, "{role}");
    }
}

#[test]
fn collect_rejects_empty_dataset() {
    let ws = Workspace::new();
    fs::write(ws.file("empty.jsonl"), "").unwrap();
    let out = ws.scripted(&["collect", "--dataset", &ws.path("empty.jsonl"), "--out-dir", &ws.path("out")]);
    assert_eq!(code(&out), 3, "{}", stderr(&out));
}

#[test]
fn validate_flags_tampered_corpus() {
    let ws = Workspace::new();
    let dir = ws.path("c");
    let out = ws.scripted(&["--alpha", "0", "collect", "--dataset", &ws.path("figure_dataset.jsonl"), "--out-dir", &dir]);
    assert!(out.status.success(), "{}", stderr(&out));
    fs::write(ws.file("c/reasoner.jsonl"), "").unwrap();
    let out = ws.cmd(&["validate", "--dir", &dir]);
    assert_eq!(code(&out), 3, "{}", stdout(&out));
}

fn data_rows(text: &str) -> usize {
    text.lines().skip(1).filter(|l| !l.trim().is_empty()).count()
}

#[test]
fn cost_single_row() {
    let ws = Workspace::new();
    let text = stdout(&ws.cmd(&["cost"]));
    assert_eq!(data_rows(&text), 1, "{text}");
    for v in ["2620", "292", "2550", "70", "1080", "60"] {
        assert!(text.split_whitespace().any(|w| w == v), "{v} missing from {text}");
    }
}

#[test]
fn cost_sweep_over_n() {
    let ws = Workspace::new();
    let out = ws.cmd(&["cost", "--sweep", "n=1..8"]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(data_rows(&stdout(&out)), 8);
    let out = ws.cmd(&["cost", "--sweep", "z=1..8"]);
    assert_eq!(code(&out), 1);
}

#[test]
fn cost_with_fraction_and_breakdown() {
    let ws = Workspace::new();
    let out = ws.cmd(&["cost", "--retrieve-fraction", "0.5", "--breakdown", "--json"]);
    let rows: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    // Halving retrieval drops 500 passage tokens each from sub-answer and
    // summarizer input and 100 summary tokens each from new-query and
    // reasoner memory: 2620 - 1200.
    assert_eq!(rows[0]["costs"][0]["input"], "1420");
    let out = ws.cmd(&["cost", "--retrieve-fraction", "1.5"]);
    assert_eq!(code(&out), 1);
}

#[test]
fn cost_against_trace() {
    let ws = Workspace::new();
    let traces = ws.path("traces");
    assert!(ws.scripted(&["--trace-dir", &traces, "run", "--query", QUERY]).status.success());
    let trace = ws.path("traces/query.json");
    let out = ws.cmd(&["cost", "--trace", &trace, "--n", "3"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("sub_answer"), "{text}");
    assert_eq!(data_rows(&text), 6, "{text}");

    fs::write(ws.file("broken.json"), "{}").unwrap();
    assert_eq!(code(&ws.cmd(&["cost", "--trace", &ws.path("broken.json")])), 3);
}

#[test]
fn graph_shows_plan_and_tiers() {
    let ws = Workspace::new();
    let out = ws.scripted(&["graph", "--query", QUERY]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("valid: 3 nodes, final Q3, tiers [Q1 Q2] [Q3]"), "{text}");
}

#[test]
fn graph_fallback_notice() {
    let ws = Workspace::new();
    fs::write(
        ws.file("bad_rules.jsonl"),
        "{\"role\":\"graph_builder\",\"match\":\"substring\",\"value\":\"Question:\",\"response\":\"I cannot plan this.\"}\n",
    )
    .unwrap();
    let out = ws.cmd(&["--backend", "scripted", "--rules", &ws.path("bad_rules.jsonl"), "--corpus", &ws.path("figure_corpus.jsonl"), "graph", "--query", QUERY]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.starts_with("fallback:"), "{text}");
    assert!(text.contains("valid: 1 nodes"), "{text}");
}

#[test]
fn strict_rejects_multiple_sinks() {
    let ws = Workspace::new();
    let plan = r#"[{\"id\":\"Q1\",\"question\":\"Who directed Inception?\",\"dependencies\":[]},{\"id\":\"Q2\",\"question\":\"Who directed Interstellar?\",\"dependencies\":[]}]"#;
    fs::write(
        ws.file("two_sinks.jsonl"),
        format!("{{\"role\":\"graph_builder\",\"match\":\"substring\",\"value\":\"Question:\",\"response\":\"{plan}\"}}\n"),
    )
    .unwrap();
    let rules = ws.path("two_sinks.jsonl");
    let corpus = ws.path("figure_corpus.jsonl");
    let lenient = ws.cmd(&["--backend", "scripted", "--rules", &rules, "--corpus", &corpus, "graph", "--query", QUERY]);
    assert!(stdout(&lenient).contains("valid: 3 nodes"), "{}", stdout(&lenient));
    let strict = ws.cmd(&["--backend", "scripted", "--rules", &rules, "--corpus", &corpus, "--strict", "graph", "--query", QUERY]);
    assert_eq!(code(&strict), 2);
    assert!(stderr(&strict).contains("2 sinks"), "{}", stderr(&strict));
}

#[test]
fn bad_flags_exit_1_and_help_exits_0() {
    let ws = Workspace::new();
    assert_eq!(code(&ws.cmd(&["run", "--bogus"])), 1);
    assert_eq!(code(&ws.cmd(&["--help"])), 0);
}
