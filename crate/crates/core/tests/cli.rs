use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use tempfile::TempDir;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn promptdiv(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_promptdiv"))
        .args(args)
        .env_remove("PROMPTDIV_API_KEY")
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(dir: &Path) -> PathBuf {
    let w = dir.join("workload");
    let out = promptdiv(&["synth", "--out-dir", s(&w), "--seed", "11"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    w
}

fn select(w: &Path, method: &str, out: &Path, extra: &[&str]) -> Output {
    let pool = w.join("pool.jsonl");
    let template = w.join("template.txt");
    let rules = w.join("mock_rules.json");
    let mut args = vec![
        "select",
        "--pool",
        s(&pool),
        "--template",
        s(&template),
        "--mock-rules",
        s(&rules),
        "--method",
        method,
        "--n",
        "30",
        "--seed",
        "7",
        "--out-dir",
        s(out),
    ];
    args.extend_from_slice(extra);
    promptdiv(&args)
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn select_is_byte_identical_across_runs() {
    let dir = TempDir::new().unwrap();
    let w = synth(dir.path());
    for method in ["random", "art-ncd", "art-2gram-char", "art-2gram-word"] {
        let a = dir.path().join(format!("{method}-a"));
        let b = dir.path().join(format!("{method}-b"));
        for out in [&a, &b] {
            let o = select(
                &w,
                method,
                out,
                &["--selective-refset", "--candidates", "10", "--tau", "0.5"],
            );
            assert!(o.status.success(), "{method}: {}", String::from_utf8_lossy(&o.stderr));
        }
        for file in ["ordering.jsonl", "report.json", "manifest.json"] {
            assert_eq!(
                fs::read(a.join(file)).unwrap(),
                fs::read(b.join(file)).unwrap(),
                "{method} {file}"
            );
        }
        let ids: Vec<serde_json::Value> = fs::read_to_string(a.join("ordering.jsonl"))
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert_eq!(ids.len(), 30);
        let report = json(&a.join("report.json"));
        let manifest_bytes = fs::read(a.join("manifest.json")).unwrap();
        let manifest: serde_json::Value = serde_json::from_slice(&manifest_bytes).unwrap();
        assert_eq!(
            report["manifest_digest"].as_str().unwrap(),
            promptdiv::manifest::digest_json(&manifest)
        );
    }
}

#[test]
fn config_errors_exit_two() {
    let dir = TempDir::new().unwrap();
    let w = synth(dir.path());
    let out = dir.path().join("o");
    let bad_method = select(&w, "art-nope", &out, &[]);
    assert_eq!(bad_method.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&bad_method.stderr);
    assert!(stderr.contains("art-2gram-char") && stderr.contains("tsdm"), "{stderr}");

    assert_eq!(select(&w, "art-embed", &out, &[]).status.code(), Some(2));
    let zero = promptdiv(&[
        "select",
        "--pool",
        s(&w.join("pool.jsonl")),
        "--template",
        s(&w.join("template.txt")),
        "--method",
        "art-ncd",
        "--n",
        "0",
        "--out-dir",
        s(&out),
    ]);
    assert_eq!(zero.status.code(), Some(2));
    assert_eq!(
        select(&w, "random", &out, &["--executor", "carrier-pigeon"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        select(&w, "random", &out, &["--executor", "http"]).status.code(),
        Some(2)
    );
    assert!(!out.join("ordering.jsonl").exists());
}

#[test]
fn replay_without_cache_exits_three_with_partial_output() {
    let dir = TempDir::new().unwrap();
    let w = synth(dir.path());
    let out = dir.path().join("replay");
    let o = select(&w, "art-ncd", &out, &["--executor", "replay"]);
    assert_eq!(o.status.code(), Some(3));
    let report = json(&out.join("report.json"));
    assert_eq!(report["execution_failure"]["step"], 1);
    assert_eq!(fs::read_to_string(out.join("ordering.jsonl")).unwrap(), "");
}

#[test]
fn replay_reproduces_mock_run_from_cache() {
    let dir = TempDir::new().unwrap();
    let w = synth(dir.path());
    let cache = dir.path().join("cache.jsonl");
    let mock_out = dir.path().join("mock");
    let replay_out = dir.path().join("replay");
    assert!(
        select(&w, "art-ncd", &mock_out, &["--cache", s(&cache), "--selective-refset"])
            .status
            .success()
    );
    let cache_before = fs::read(&cache).unwrap();
    let o = select(
        &w,
        "art-ncd",
        &replay_out,
        &["--cache", s(&cache), "--selective-refset", "--executor", "replay"],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read(&cache).unwrap(), cache_before);
    assert_eq!(
        fs::read(mock_out.join("ordering.jsonl")).unwrap(),
        fs::read(replay_out.join("ordering.jsonl")).unwrap()
    );
    let (a, b) = (
        json(&mock_out.join("report.json")),
        json(&replay_out.join("report.json")),
    );
    assert_eq!(a["apfd"], b["apfd"]);
    assert_eq!(a["unique_words"], b["unique_words"]);
}

#[test]
fn evaluate_recomputes_report_from_cache() {
    let dir = TempDir::new().unwrap();
    let w = synth(dir.path());
    let cache = dir.path().join("cache.jsonl");
    let sel = dir.path().join("sel");
    assert!(select(&w, "art-ncd", &sel, &["--cache", s(&cache)]).status.success());
    let ev = dir.path().join("ev");
    let o = promptdiv(&[
        "evaluate",
        "--pool",
        s(&w.join("pool.jsonl")),
        "--ordering",
        s(&sel.join("ordering.jsonl")),
        "--cache",
        s(&cache),
        "--out-dir",
        s(&ev),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let (a, b) = (json(&sel.join("report.json")), json(&ev.join("report.json")));
    for key in ["apfd", "curve", "unique_words", "n", "m"] {
        assert_eq!(a[key], b[key], "{key}");
    }

    // Four runs per input are cached; asking for a fifth names the gap.
    let o = promptdiv(&[
        "evaluate",
        "--pool",
        s(&w.join("pool.jsonl")),
        "--ordering",
        s(&sel.join("ordering.jsonl")),
        "--cache",
        s(&cache),
        "--repetitions",
        "5",
        "--out-dir",
        s(&ev),
    ]);
    assert_eq!(o.status.code(), Some(3));
    let first = fs::read_to_string(sel.join("ordering.jsonl")).unwrap();
    let first_id = serde_json::from_str::<serde_json::Value>(first.lines().next().unwrap()).unwrap()["id"].clone();
    let stderr = String::from_utf8_lossy(&o.stderr);
    assert!(
        stderr.contains(first_id.as_str().unwrap()) && stderr.contains("run 5"),
        "{stderr}"
    );

    // Unknown ids are named.
    let bogus = dir.path().join("bogus.jsonl");
    fs::write(
        &bogus,
        "{\"rank\":1,\"id\":\"nope\",\"score\":\"inf\",\"refset_size\":0}\n",
    )
    .unwrap();
    let o = promptdiv(&[
        "evaluate",
        "--pool",
        s(&w.join("pool.jsonl")),
        "--ordering",
        s(&bogus),
        "--cache",
        s(&cache),
        "--out-dir",
        s(&ev),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("nope"));
}

#[test]
fn evaluate_front_loaded_failures_and_no_failures() {
    let dir = TempDir::new().unwrap();
    let pool = dir.path().join("pool.jsonl");
    fs::write(
        &pool,
        (1..=6)
            .map(|i| format!("{{\"id\":\"t{i}\",\"variables\":{{\"input\":\"q{i}\"}},\"expected\":\"{i}\"}}\n"))
            .collect::<String>(),
    )
    .unwrap();
    let ordering = dir.path().join("ordering.jsonl");
    fs::write(
        &ordering,
        (1..=6)
            .map(|i| format!("{{\"rank\":{i},\"id\":\"t{i}\",\"score\":null,\"refset_size\":0}}\n"))
            .collect::<String>(),
    )
    .unwrap();
    let write_cache = |path: &Path, failing: &[usize]| {
        let mut text = String::new();
        for i in 1..=6 {
            let out = if failing.contains(&i) {
                "wrong".to_string()
            } else {
                format!("it is {i}")
            };
            text.push_str(&format!(
                "{{\"test_id\":\"t{i}\",\"run_index\":1,\"output\":\"{out}\",\"correct\":{},\"latency_ms\":0,\"backend\":\"mock\",\"model_name\":\"mock\"}}\n",
                !failing.contains(&i)
            ));
        }
        fs::write(path, text).unwrap();
    };
    let cache = dir.path().join("front.jsonl");
    write_cache(&cache, &[1, 2]);
    let out = dir.path().join("front");
    let o = promptdiv(&[
        "evaluate",
        "--pool",
        s(&pool),
        "--ordering",
        s(&ordering),
        "--cache",
        s(&cache),
        "--repetitions",
        "1",
        "--out-dir",
        s(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let apfd = json(&out.join("report.json"))["apfd"].as_f64().unwrap();
    assert!(apfd > 75.0, "{apfd}");

    let none = dir.path().join("none.jsonl");
    write_cache(&none, &[]);
    let out = dir.path().join("none");
    let o = promptdiv(&[
        "evaluate",
        "--pool",
        s(&pool),
        "--ordering",
        s(&ordering),
        "--cache",
        s(&none),
        "--repetitions",
        "1",
        "--out-dir",
        s(&out),
    ]);
    assert!(o.status.success());
    let report = json(&out.join("report.json"));
    assert!(report["apfd"].is_null());
    assert_eq!(report["curve_not_applicable"], true);
}

#[test]
fn art_embed_with_fixture_table() {
    let dir = TempDir::new().unwrap();
    let run = |out: &Path| {
        promptdiv(&[
            "select",
            "--pool",
            s(&fixture("embed_pool.jsonl")),
            "--template",
            s(&fixture("template.txt")),
            "--method",
            "art-embed",
            "--embeddings",
            s(&fixture("embeddings_3.jsonl")),
            "--mock-rules",
            s(&fixture("mock_rules.json")),
            "--n",
            "3",
            "--candidates",
            "3",
            "--seed",
            "1",
            "--out-dir",
            s(out),
        ])
    };
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = run(out);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    assert_eq!(
        fs::read(a.join("ordering.jsonl")).unwrap(),
        fs::read(b.join("ordering.jsonl")).unwrap()
    );
    let report = json(&a.join("report.json"));
    assert_eq!(report["n"], 3);
    assert_eq!(report["m"], 1);
    let manifest = json(&a.join("manifest.json"));
    assert_eq!(manifest["config"]["distance"]["dim"], 3);
    assert!(manifest["file_digests"]["embeddings"].is_string());
}

#[test]
fn tsdm_select_writes_full_ordering() {
    let dir = TempDir::new().unwrap();
    let pool = fixture("embed_pool.jsonl");
    let out = dir.path().join("t");
    let o = promptdiv(&[
        "select",
        "--pool",
        s(&pool),
        "--template",
        s(&fixture("template.txt")),
        "--method",
        "tsdm",
        "--n",
        "2",
        "--mock-rules",
        s(&fixture("mock_rules.json")),
        "--out-dir",
        s(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(
        fs::read_to_string(out.join("ordering.jsonl")).unwrap().lines().count(),
        3
    );
    let report = json(&out.join("report.json"));
    assert!(report["notes"]
        .as_array()
        .unwrap()
        .iter()
        .any(|n| n.as_str().unwrap().starts_with("tsdm")));
}

#[test]
fn bench_writes_timings() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("bench.json");
    let o = promptdiv(&[
        "bench",
        "--art-pool-sizes",
        "100,200",
        "--art-n",
        "5",
        "--tsdm-pool-size",
        "100",
        "--tsdm-percentages",
        "98,96",
        "--out",
        s(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report = json(&out);
    assert_eq!(report["timings"].as_array().unwrap().len(), 6);
    assert_eq!(promptdiv(&["bench", "--art-n", "0"]).status.code(), Some(2));
}

/// Minimal chat-completions server: answers `reply` to every request,
/// failing the first `fail_first` requests with status 500.
fn serve(reply: &'static str, fail_first: usize) -> (String, Arc<AtomicUsize>, Arc<std::sync::Mutex<Vec<String>>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
    let hits = Arc::new(AtomicUsize::new(0));
    let bodies = Arc::new(std::sync::Mutex::new(Vec::new()));
    let (h, b) = (hits.clone(), bodies.clone());
    std::thread::spawn(move || {
        for stream in listener.incoming() {
            let mut stream = stream.unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut len = 0;
            let mut auth = String::new();
            loop {
                let mut line = String::new();
                if reader.read_line(&mut line).unwrap() == 0 || line == "\r\n" {
                    break;
                }
                let lower = line.to_ascii_lowercase();
                if let Some(v) = lower.strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
                if lower.starts_with("authorization:") {
                    auth = format!("authorization: {}", line.split_once(':').unwrap().1.trim());
                }
            }
            let mut body = vec![0; len];
            reader.read_exact(&mut body).unwrap();
            b.lock()
                .unwrap()
                .push(format!("{auth}\n{}", String::from_utf8_lossy(&body)));
            let n = h.fetch_add(1, Ordering::SeqCst);
            let (status, payload) = if n < fail_first {
                ("500 Internal Server Error", "{}".to_string())
            } else {
                (
                    "200 OK",
                    serde_json::json!({"choices": [{"message": {"role": "assistant", "content": reply}}]}).to_string(),
                )
            };
            let resp = format!(
                "HTTP/1.1 {status}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{payload}",
                payload.len()
            );
            stream.write_all(resp.as_bytes()).unwrap();
        }
    });
    (url, hits, bodies)
}

#[test]
fn http_executor_round_trip() {
    use promptdiv::corpus::{PromptTemplate, TestInput};
    use promptdiv::execution::{Backend, ExecutionCache, Executor, HttpBackend, PromptExecutor};
    use std::time::Duration;

    let (url, hits, bodies) = serve("The answer is 4.", 1);
    let backend =
        HttpBackend::new(&url, "tiny-model", 0.0, Some("sk-test".into())).with_backoff(Duration::from_millis(5));
    assert_eq!(backend.model_name(), "tiny-model");
    let exec = PromptExecutor::new(
        PromptTemplate::parse("Q: {input}").unwrap(),
        Box::new(backend),
        ExecutionCache::in_memory(),
        1,
        0.5,
    );
    let v = exec.execute(&TestInput::with_text("q1", "2+2", "4")).unwrap();
    assert!(v.passing);
    assert_eq!(hits.load(Ordering::SeqCst), 2, "one retry after the 500");
    let seen = bodies.lock().unwrap().clone();
    assert!(seen[1].starts_with("authorization: Bearer sk-test"), "{}", seen[1]);
    let body: serde_json::Value = serde_json::from_str(seen[1].split_once('\n').unwrap().1).unwrap();
    assert_eq!(body["model"], "tiny-model");
    assert_eq!(body["messages"][0]["content"], "Q: 2+2");
    let rec = exec.cache().get("q1", 1).unwrap();
    assert_eq!((rec.backend.as_str(), rec.model_name.as_str()), ("http", "tiny-model"));

    // A second execute is served from the cache.
    exec.execute(&TestInput::with_text("q1", "2+2", "4")).unwrap();
    assert_eq!(hits.load(Ordering::SeqCst), 2);
}

#[test]
fn http_executor_gives_up_after_three_attempts() {
    use promptdiv::corpus::{PromptTemplate, TestInput};
    use promptdiv::execution::{ExecError, ExecutionCache, Executor, HttpBackend, PromptExecutor};
    use std::time::Duration;

    let (url, hits, _) = serve("unused", usize::MAX);
    let backend = HttpBackend::new(&url, "m", 0.0, None).with_backoff(Duration::from_millis(1));
    let exec = PromptExecutor::new(
        PromptTemplate::parse("{input}").unwrap(),
        Box::new(backend),
        ExecutionCache::in_memory(),
        1,
        0.5,
    );
    match exec.execute(&TestInput::with_text("q9", "x", "y")) {
        Err(ExecError::Backend {
            test_id,
            run_index,
            message,
        }) => {
            assert_eq!((test_id.as_str(), run_index), ("q9", 1));
            assert!(message.contains("500"), "{message}");
        }
        other => panic!("{other:?}"),
    }
    assert_eq!(hits.load(Ordering::SeqCst), 3);
}

#[test]
fn http_cli_reads_key_from_environment_only() {
    let dir = TempDir::new().unwrap();
    let (url, _, bodies) = serve("Paris 4 5", 0);
    let out = dir.path().join("h");
    let o = Command::new(env!("CARGO_BIN_EXE_promptdiv"))
        .args([
            "select",
            "--pool",
            s(&fixture("embed_pool.jsonl")),
            "--template",
            s(&fixture("template.txt")),
            "--method",
            "random",
            "--n",
            "3",
            "--executor",
            "http",
            "--endpoint",
            &url,
            "--model",
            "m1",
            "--api-key-env",
            "MY_TEST_KEY",
            "--out-dir",
            s(&out),
        ])
        .env("MY_TEST_KEY", "secret-123")
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let seen = bodies.lock().unwrap().clone();
    assert_eq!(seen.len(), 3);
    assert!(seen.iter().all(|b| b.starts_with("authorization: Bearer secret-123")));
    assert_eq!(json(&out.join("report.json"))["m"], 0);
    let manifest = fs::read_to_string(out.join("manifest.json")).unwrap();
    assert!(!manifest.contains("secret-123"));
    assert_eq!(promptdiv(&["select", "--api-key", "x"]).status.code(), Some(2));
}
