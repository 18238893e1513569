use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpStream;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

use serde_json::Value;

fn ehi() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ehi"))
}

fn run(args: &[&str]) -> Output {
    ehi().args(args).output().expect("binary runs")
}

fn stdout_json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).expect("stdout is one JSON document")
}

fn write(dir: &Path, name: &str, contents: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, contents).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn pair(dir: &Path) -> (PathBuf, PathBuf) {
    (
        write(dir, "source.txt", "Alice met Bob in Prague. Acme Corp hired Alice."),
        write(dir, "summary.txt", "Alice met Dave in Tokyo."),
    )
}

#[test]
fn score_prints_report() {
    let dir = tempfile::tempdir().unwrap();
    let (src, sum) = pair(dir.path());
    let out = run(&["score", "--source", s(&src), "--summary", s(&sum)]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let v = stdout_json(&out);
    for key in ["ehi", "ph", "ef", "nh", "of", "lf", "entity_precision", "entity_recall", "entity_f1"] {
        assert!(v.get(key).is_some_and(Value::is_number), "missing {key}");
    }
    // alice grounded; dave and tokyo unsupported
    assert_eq!(v["ef"], 1.0);
    assert_eq!(v["nh"], 2.0);
    assert_eq!(v["reference_used"], false);
}

#[test]
fn score_with_reference() {
    let dir = tempfile::tempdir().unwrap();
    let (src, sum) = pair(dir.path());
    let rf = write(dir.path(), "ref.txt", "Alice and Dave travelled.");
    let out = run(&["score", "--source", s(&src), "--summary", s(&sum), "--reference", s(&rf)]);
    assert_eq!(out.status.code(), Some(0));
    let v = stdout_json(&out);
    assert_eq!(v["reference_used"], true);
    assert_eq!(v["ph"], 1.0);
    assert_eq!(v["nh"], 1.0);

    let free = run(&[
        "score", "--source", s(&src), "--summary", s(&sum), "--reference", s(&rf), "--reference-free",
    ]);
    assert_eq!(stdout_json(&free)["reference_used"], false);
}

#[test]
fn score_uses_custom_gazetteer_and_config() {
    let dir = tempfile::tempdir().unwrap();
    let src = write(dir.path(), "source.txt", "the zorblax team met");
    let sum = write(dir.path(), "summary.txt", "zorblax zorblax zorblax zorblax");
    let gaz = write(dir.path(), "g.tsv", "# custom\nZorblax\tORG\n");
    let out = run(&["score", "--source", s(&src), "--summary", s(&sum), "--gazetteer", s(&gaz)]);
    let v = stdout_json(&out);
    assert_eq!(v["ef"], 1.0);
    assert_eq!(v["of"], 2.0);

    let cfg = write(dir.path(), "c.json", r#"{"of_repeat_cap": 3}"#);
    let out = run(&[
        "score", "--source", s(&src), "--summary", s(&sum), "--gazetteer", s(&gaz), "--config", s(&cfg),
    ]);
    assert_eq!(stdout_json(&out)["of"], 1.0);

    // the flag wins over the file
    let out = run(&[
        "score", "--source", s(&src), "--summary", s(&sum), "--gazetteer", s(&gaz), "--config", s(&cfg),
        "--of-repeat-cap", "4",
    ]);
    assert_eq!(stdout_json(&out)["of"], 0.0);
}

#[test]
fn missing_files_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let (src, sum) = pair(dir.path());
    let out = run(&["score", "--source", s(&src), "--summary", s(&sum), "--gazetteer", "/no/such/gazetteer.tsv"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("/no/such/gazetteer.tsv"));
    assert!(out.stdout.is_empty());

    let out = run(&["score", "--source", "/no/such/source.txt", "--summary", s(&sum)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn parse_errors_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let (src, sum) = pair(dir.path());
    let gaz = write(dir.path(), "bad.tsv", "Alice\tPERSON\nBob PERSON\n");
    let out = run(&["score", "--source", s(&src), "--summary", s(&sum), "--gazetteer", s(&gaz)]);
    assert_eq!(out.status.code(), Some(3));

    let cfg = write(dir.path(), "bad.json", "{ not json");
    let out = run(&["score", "--source", s(&src), "--summary", s(&sum), "--config", s(&cfg)]);
    assert_eq!(out.status.code(), Some(3));

    let cfg = write(dir.path(), "typed.json", r#"{"of_repeat_cap": "two"}"#);
    let out = run(&["score", "--source", s(&src), "--summary", s(&sum), "--config", s(&cfg)]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn help_and_unknown_flags() {
    for sub in ["score", "score-corpus", "split", "train-toy", "serve"] {
        let out = run(&[sub, "--help"]);
        assert_eq!(out.status.code(), Some(0), "{sub} --help");
        let out = run(&[sub, "--definitely-not-a-flag"]);
        assert_eq!(out.status.code(), Some(2), "{sub} unknown flag");
    }
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn randomized_commands_require_seed() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = write_corpus(dir.path(), 10);
    let out = run(&["split", "--in", s(&corpus), "--out-dir", s(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
    let out = run(&["train-toy", "--out-dir", s(&dir.path().join("t"))]);
    assert_eq!(out.status.code(), Some(2));
}

fn write_corpus(dir: &Path, n: usize) -> PathBuf {
    let mut text = String::new();
    for i in 0..n {
        text.push_str(&format!(
            "{{\"id\":\"r{i}\",\"source\":\"Alice visited Prague with Bob.\",\"summary\":\"Alice visited Tokyo.\",\"meta\":{i}}}\n"
        ));
    }
    write(dir, "corpus.jsonl", &text)
}

fn lines(p: &Path) -> Vec<Value> {
    fs::read_to_string(p)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn score_corpus_scores_and_skips() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = write(
        dir.path(),
        "c.jsonl",
        concat!(
            "{\"id\":\"a\",\"source\":\"Alice met Bob.\",\"summary\":\"Alice met Bob.\"}\n",
            "{\"id\":\"b\",\"source\":\"Alice met Bob.\",\"summary\":\"Zed met Bob.\"}\n",
            "{\"id\":\"c\",\"source\":\"Alice met Bob.\"}\n",
            "{\"id\":\"d\",\"source\":\"Oracle and IBM.\",\"summary\":\"IBM.\",\"reference\":\"IBM.\",\"tag\":\"x\"}\n",
        ),
    );
    let out_path = dir.path().join("scored.jsonl");
    let out = run(&["score-corpus", "--in", s(&corpus), "--out", s(&out_path)]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let scored = lines(&out_path);
    let ids: Vec<&str> = scored.iter().map(|r| r["id"].as_str().unwrap()).collect();
    assert_eq!(ids, ["a", "b", "d"]);
    assert_eq!(scored[0]["scores"]["ehi"], 1.0);
    assert_eq!(scored[2]["tag"], "x");

    let stats: Value = serde_json::from_str(String::from_utf8_lossy(&out.stderr).trim()).unwrap();
    assert_eq!(stats["n"], 3);
    assert_eq!(stats["skipped"], 1);
    let mean: f64 = scored.iter().map(|r| r["scores"]["ehi"].as_f64().unwrap()).sum::<f64>() / 3.0;
    assert!((stats["mean_ehi"].as_f64().unwrap() - mean).abs() < 1e-12);
    assert!(stats.get("frac_ehi_ge_0.3_le_0.6").is_some());
    assert!(stats.get("mean_f1").is_some());
}

#[test]
fn score_corpus_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = write_corpus(dir.path(), 200);
    let a = dir.path().join("a.jsonl");
    let b = dir.path().join("b.jsonl");
    assert!(run(&["score-corpus", "--in", s(&corpus), "--out", s(&a)]).status.success());
    assert!(run(&["score-corpus", "--in", s(&corpus), "--out", s(&b)]).status.success());
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let ids: Vec<String> = lines(&a).iter().map(|r| r["id"].as_str().unwrap().to_string()).collect();
    let want: Vec<String> = (0..200).map(|i| format!("r{i}")).collect();
    assert_eq!(ids, want);
}

#[test]
fn score_corpus_malformed_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = write(dir.path(), "c.jsonl", "{\"id\":\"a\",\"source\":\"x\"}\n{oops\n");
    let out = run(&["score-corpus", "--in", s(&corpus), "--out", s(&dir.path().join("o.jsonl"))]);
    assert_eq!(out.status.code(), Some(3));
}

fn split_sizes(dir: &Path, n: usize, seed: &str) -> (Vec<Value>, Vec<Value>, Vec<Value>) {
    let corpus = write_corpus(dir, n);
    let out_dir = dir.join(format!("split-{seed}"));
    let out = run(&["split", "--in", s(&corpus), "--out-dir", s(&out_dir), "--fractions", "0.8,0.1,0.1", "--seed", seed]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    (
        lines(&out_dir.join("train.jsonl")),
        lines(&out_dir.join("val.jsonl")),
        lines(&out_dir.join("test.jsonl")),
    )
}

#[test]
fn split_examples() {
    let dir = tempfile::tempdir().unwrap();
    let (tr, va, te) = split_sizes(dir.path(), 10, "42");
    assert_eq!((tr.len(), va.len(), te.len()), (8, 1, 1));
    let mut ids: Vec<String> = tr.iter().chain(&va).chain(&te).map(|r| r["id"].to_string()).collect();
    ids.sort();
    ids.dedup();
    assert_eq!(ids.len(), 10);
    // extra fields survive
    assert!(tr.iter().all(|r| r.get("meta").is_some()));

    let (tr2, va2, te2) = split_sizes(dir.path(), 10, "42");
    assert_eq!((tr, va, te), (tr2, va2, te2));

    let nine = tempfile::tempdir().unwrap();
    let (tr, va, te) = split_sizes(nine.path(), 9, "1");
    assert_eq!((tr.len(), va.len(), te.len()), (7, 1, 1));
}

#[test]
fn split_rejects_bad_fractions() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = write_corpus(dir.path(), 10);
    let o = dir.path().join("o");
    for fr in ["0.8,0.1", "0.5,0.1,0.1", "a,b,c"] {
        let out = run(&["split", "--in", s(&corpus), "--out-dir", s(&o), "--fractions", fr, "--seed", "1"]);
        assert_eq!(out.status.code(), Some(2), "{fr}");
    }
}

#[test]
fn train_zero_updates_logs_one_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "t.json", r#"{"max_updates": 0, "val_size": 50}"#);
    let out_dir = dir.path().join("run");
    let out = run(&["train-toy", "--config", s(&cfg), "--out-dir", s(&out_dir), "--seed", "5"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let log = lines(&out_dir.join("metrics.jsonl"));
    assert_eq!(log.len(), 1);
    assert_eq!(log[0]["update"], 0);
    let ckpt: Value = serde_json::from_slice(&fs::read(out_dir.join("best_checkpoint.json")).unwrap()).unwrap();
    assert_eq!(ckpt["format"], "ehi-toy-policy");
    assert_eq!(ckpt["version"], 1);
    let v = stdout_json(&out);
    assert_eq!(v["best_update"], 0);
}

#[test]
fn train_is_deterministic_and_flags_override() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "t.json", r#"{"max_updates": 1000, "regen_interval": 100, "val_size": 50}"#);
    let mut logs = Vec::new();
    for name in ["a", "b"] {
        let out_dir = dir.path().join(name);
        let out = run(&[
            "train-toy", "--config", s(&cfg), "--out-dir", s(&out_dir), "--seed", "7", "--max-updates", "300",
        ]);
        assert_eq!(out.status.code(), Some(0));
        logs.push(fs::read(out_dir.join("metrics.jsonl")).unwrap());
    }
    assert_eq!(logs[0], logs[1]);
    let text = String::from_utf8(logs[0].clone()).unwrap();
    let updates: Vec<u64> = text
        .lines()
        .map(|l| serde_json::from_str::<Value>(l).unwrap()["update"].as_u64().unwrap())
        .collect();
    assert_eq!(updates, [0, 100, 200, 300]);
}

#[test]
fn train_default_config_reports_best() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["train-toy", "--out-dir", s(&dir.path().join("run")), "--seed", "0"]);
    assert_eq!(out.status.code(), Some(0));
    let v = stdout_json(&out);
    let best = v["best_val_ehi"].as_f64().unwrap();
    let initial = v["initial_val_ehi"].as_f64().unwrap();
    assert!(best >= 0.85 && best > initial, "{v}");
}

#[test]
fn train_divergence_exits_4_with_dump() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("run");
    let out = run(&[
        "train-toy", "--out-dir", s(&out_dir), "--seed", "1", "--learning-rate", "1e308", "--max-updates", "20",
    ]);
    assert_eq!(out.status.code(), Some(4));
    assert!(out_dir.join("diverged_state.json").exists());
}

#[test]
fn train_invalid_config_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["train-toy", "--out-dir", s(&dir.path().join("r")), "--seed", "1", "--batch-size", "0"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn serve_stdio_answers_in_order() {
    let mut child = ehi()
        .args(["serve", "--stdio"])
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    {
        let mut stdin = child.stdin.take().unwrap();
        stdin
            .write_all(
                concat!(
                    "{\"id\":\"1\",\"method\":\"ping\",\"params\":{}}\n",
                    "{\n",
                    "{\"id\":\"2\",\"method\":\"score\",\"params\":{\"entities_source\":[\"oracle\",\"microsoft\"],\"entities_summary\":[\"ibm\"]}}\n",
                )
                .as_bytes(),
            )
            .unwrap();
    }
    let out = child.wait_with_output().unwrap();
    assert!(out.status.success());
    let resp: Vec<Value> = String::from_utf8(out.stdout)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(resp.len(), 3);
    assert_eq!(resp[0]["id"], "1");
    assert!(resp[0]["result"]["version"].is_string());
    assert_eq!(resp[1]["id"], "");
    assert_eq!(resp[1]["error"]["code"], "parse_error");
    assert_eq!(resp[2]["result"]["nh"], 1.0);
    assert!(resp[2]["result"]["ehi"].as_f64().unwrap() < 1.0);
}

#[test]
fn serve_requires_a_transport() {
    assert_eq!(run(&["serve"]).status.code(), Some(2));
    assert_eq!(run(&["serve", "--stdio", "--listen", "127.0.0.1:0"]).status.code(), Some(2));
}

#[test]
fn serve_tcp() {
    let mut child = ehi()
        .args(["serve", "--listen", "127.0.0.1:0"])
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    let mut stderr = BufReader::new(child.stderr.take().unwrap());
    let mut line = String::new();
    stderr.read_line(&mut line).unwrap();
    let addr = line.trim().strip_prefix("listening on ").expect("announces address").to_string();

    let mut conn = TcpStream::connect(&addr).unwrap();
    let mut req = String::new();
    for i in 0..50 {
        req.push_str(&format!("{{\"id\":\"{i}\",\"method\":\"ping\",\"params\":{{}}}}\n"));
    }
    conn.write_all(req.as_bytes()).unwrap();
    conn.shutdown(std::net::Shutdown::Write).unwrap();
    let mut text = String::new();
    conn.read_to_string(&mut text).unwrap();
    let ids: Vec<String> = text
        .lines()
        .map(|l| serde_json::from_str::<Value>(l).unwrap()["id"].as_str().unwrap().to_string())
        .collect();
    let want: Vec<String> = (0..50).map(|i| i.to_string()).collect();
    assert_eq!(ids, want);

    let busy = run(&["serve", "--listen", &addr]);
    assert_eq!(busy.status.code(), Some(2));
    child.kill().unwrap();
    child.wait().unwrap();
}
