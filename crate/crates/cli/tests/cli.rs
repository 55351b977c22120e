use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use lexcourt::mock::{MockOptions, MockServer};
use tempfile::TempDir;

fn lexcourt(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lexcourt")).current_dir(dir).args(args).output().expect("spawn lexcourt")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write(dir: &Path, name: &str, text: &str) {
    fs::write(dir.join(name), text).unwrap();
}

/// Two candidates per query; the relevant one shares the query's words.
fn retrieval_files(dir: &Path) {
    write(
        dir,
        "cands.jsonl",
        concat!(
            r#"{"id":"c1","text":"negligent driver collided with a cyclist at night"}"#, "\n",
            r#"{"id":"c2","text":"the landlord withheld the tenant deposit after the lease"}"#, "\n",
            r#"{"id":"c3","text":"a patent on a folding bicycle frame was infringed"}"#, "\n",
        ),
    );
    write(
        dir,
        "queries.jsonl",
        concat!(
            r#"{"id":"q1","text":"driver collided with cyclist"}"#, "\n",
            r#"{"id":"q2","text":"tenant deposit withheld by landlord"}"#, "\n",
        ),
    );
    write(dir, "qrels.txt", "q1 0 c1 1\nq2 0 c2 1\n");
}

#[test]
fn bm25_score_fuse_eval_chain() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    retrieval_files(d);
    assert!(lexcourt(d, &["index", "cands.jsonl", "--out", "idx.json"]).status.success());
    let o = lexcourt(d, &["score", "--queries", "queries.jsonl", "--index", "idx.json", "-k", "5", "--out", "bm25.tsv"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = lexcourt(d, &["fuse", "--table", "bm25.tsv", "--top-k", "1", "--tag", "t", "--out", "run.trec"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let run = fs::read_to_string(d.join("run.trec")).unwrap();
    assert_eq!(run.lines().count(), 2);
    let o = lexcourt(d, &["eval", "--run", "run.trec", "--qrels", "qrels.txt", "--json"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert_eq!(v["metrics"]["micro_f1"], 1.0);
    assert_eq!(v["metrics"]["R@1"], 1.0);
}

#[test]
fn tune_reports_weights_summing_to_one() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    write(d, "a.tsv", "q1\tc1\t0.9\nq1\tc2\t0.1\nq2\tc1\t0.8\nq2\tc2\t0.2\n");
    write(d, "b.tsv", "q1\tc1\t0.2\nq1\tc2\t0.7\nq2\tc1\t0.1\nq2\tc2\t0.9\n");
    write(d, "qrels.txt", "q1 0 c1 1\nq2 0 c2 1\n");
    let o = lexcourt(d, &["tune", "weights", "--table", "a.tsv", "--table", "b.tsv", "--qrels", "qrels.txt", "--json"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    let m = &v["metrics"];
    let total = m["weight a"].as_f64().unwrap() + m["weight b"].as_f64().unwrap();
    assert!((total - 1.0).abs() < 1e-9, "{m}");
    assert_eq!(m["objective"], 1.0);
}

#[test]
fn dry_run_rejects_bad_config_with_exit_2() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    retrieval_files(d);
    write(
        d,
        "bad.toml",
        r#"schema_version = 1
run_id = "bad"
task = "case_retrieval"
[inputs]
queries = "queries.jsonl"
candidates = "cands.jsonl"
[output]
path = "out.trec"
[[stages]]
type = "bm25"
k = 0
"#,
    );
    let o = lexcourt(d, &["--dry-run", "run", "bad.toml"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("stages[0].k"), "{}", stderr(&o));
    assert!(!d.join("out.trec").exists());

    let o = lexcourt(d, &["--dry-run", "run", "bad.toml", "--set", "stages.0.k=3"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(!d.join("out.trec").exists());
}

#[test]
fn malformed_input_exits_4_and_usage_errors_exit_2() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    write(d, "broken.tsv", "q1\tc1\tnot-a-number\n");
    let o = lexcourt(d, &["fuse", "--table", "broken.tsv", "--out", "run.trec"]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
    let o = lexcourt(d, &["eval", "--run", "missing.trec", "--qrels", "missing.txt"]);
    assert_eq!(o.status.code(), Some(4));
    assert_eq!(lexcourt(d, &["frobnicate"]).status.code(), Some(2));
}

#[test]
fn entail_against_mock_service_then_warm_cache() {
    let server = MockServer::bind("127.0.0.1:0", MockOptions::default()).unwrap();
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    write(d, "queries.jsonl", r#"{"id":"q1","text":"the contract was void for mistake"}"#);
    write(
        d,
        "paragraphs.jsonl",
        concat!(
            r#"{"query":"q1","id":"001","text":"a contract entered by mistake is void"}"#, "\n",
            r#"{"query":"q1","id":"002","text":"costs follow the event"}"#, "\n",
        ),
    );
    let llm = format!("{}=mock-model", server.url());
    let args = ["--cache-dir", "cache", "entail", "--queries", "queries.jsonl", "--paragraphs", "paragraphs.jsonl", "--llm", &llm, "--out", "out.txt"];
    let o = lexcourt(d, &args);
    assert!(o.status.success(), "{}", stderr(&o));
    let first = fs::read(d.join("out.txt")).unwrap();
    let served = server.request_count();
    assert!(served > 0);
    let o = lexcourt(d, &args);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read(d.join("out.txt")).unwrap(), first);
    assert_eq!(server.request_count(), served, "warm cache must not reach the service");
}

#[test]
fn stats_and_heuristics() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    write(
        d,
        "tort.jsonl",
        concat!(
            r#"{"id":"t1","facts":["f"],"plaintiff_claims":[{"text":"a","accepted":true}],"defendant_claims":[{"text":"b","accepted":false}],"tort":true}"#, "\n",
            r#"{"id":"t2","facts":["f"],"plaintiff_claims":[{"text":"a","accepted":false}],"defendant_claims":[{"text":"b","accepted":true}],"tort":false}"#, "\n",
        ),
    );
    let o = lexcourt(d, &["stats", "tort.jsonl", "--json"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert!(v.get("tort.jsonl").is_some());

    write(
        d,
        "preds.jsonl",
        concat!(
            r#"{"id":"t1","tort":true,"plaintiff_labels":[true],"defendant_labels":[false]}"#, "\n",
            r#"{"id":"t2","tort":false,"plaintiff_labels":[false],"defendant_labels":[true]}"#, "\n",
        ),
    );
    let o = lexcourt(d, &["judge", "--predictions", "preds.jsonl", "--out", "post.jsonl"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = lexcourt(d, &["eval", "--predictions", "post.jsonl", "--gold", "tort.jsonl", "--json"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert!(v["metrics"]["tort_accuracy"].as_f64().is_some(), "{v}");
}
