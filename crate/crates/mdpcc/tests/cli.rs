//! Integration tests that drive the installed binary end to end: backend
//! transports (HTTP and child processes), worker-count determinism,
//! interrupted-run resume, and the exit-code contract.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use mdpcc::backends::dispatch_wire;
use mdpcc::data::read_augmented;
use mdpcc::pipeline::RunSummary;
use mdpcc_core::backends::{GenerationResult, MockTableBackend, WireRequest, WireResponse};
use mdpcc_core::extraction::build_prompt;
use mdpcc_core::relations::default_registry;

fn golden_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures/golden")
}

/// Runs the binary with pinned timestamps; the caller checks the status.
fn run_raw(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mdpcc"))
        .args(args)
        .env("SOURCE_DATE_EPOCH", "0")
        .env_remove("MDPCC_CACHE_DIR")
        .output()
        .expect("binary runs")
}

fn run_ok(args: &[&str]) -> Output {
    let output = run_raw(args);
    assert!(
        output.status.success(),
        "command {args:?} failed with {:?}\nstdout:\n{}\nstderr:\n{}",
        output.status.code(),
        String::from_utf8_lossy(&output.stdout),
        String::from_utf8_lossy(&output.stderr),
    );
    output
}

/// Answers one HTTP request on the stream by dispatching the JSON body
/// against the mock table, mirroring what a model server would do.
fn answer_http(stream: &mut TcpStream, backend: &MockTableBackend) -> std::io::Result<()> {
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut request_line = String::new();
    reader.read_line(&mut request_line)?;
    let mut content_length = 0usize;
    loop {
        let mut header = String::new();
        if reader.read_line(&mut header)? == 0 || header.trim().is_empty() {
            break;
        }
        if let Some(rest) = header.to_ascii_lowercase().strip_prefix("content-length:") {
            content_length = rest.trim().parse().unwrap_or(0);
        }
    }
    let mut body = vec![0u8; content_length];
    reader.read_exact(&mut body)?;
    let response = match serde_json::from_slice::<WireRequest>(&body) {
        Ok(request) => dispatch_wire(backend, &request),
        Err(e) => WireResponse {
            text: String::new(),
            tokens: None,
            logprobs: None,
            error: Some(format!("invalid request: {e}")),
        },
    };
    let payload = serde_json::to_string(&response).expect("response serializes");
    let http = format!(
        "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{payload}",
        payload.len(),
    );
    stream.write_all(http.as_bytes())
}

/// Serves the mock table over HTTP on a background thread. With a request
/// limit the server stops listening once it is reached, simulating an
/// outage; `served` counts answered requests either way.
fn spawn_model_server(
    listener: TcpListener,
    backend: MockTableBackend,
    limit: Option<usize>,
    served: Arc<AtomicUsize>,
) {
    std::thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { break };
            if answer_http(&mut stream, &backend).is_err() {
                continue;
            }
            let answered = served.fetch_add(1, Ordering::SeqCst) + 1;
            if limit.is_some_and(|cap| answered >= cap) {
                break;
            }
        }
    });
}

fn golden_mock_table() -> MockTableBackend {
    let src = std::fs::read_to_string(golden_dir().join("mock_backend.jsonl")).unwrap();
    MockTableBackend::from_jsonl_str("serve", &src).unwrap()
}

/// The checked-in reference articles, augmented over a real HTTP hop
/// instead of the in-process mock, must come out with the same content.
#[test]
fn remote_backend_round_trips_the_reference_corpus() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let endpoint = format!("remote:http://{}", listener.local_addr().unwrap());
    spawn_model_server(listener, golden_mock_table(), None, Arc::default());

    let golden = golden_dir();
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("out");
    run_ok(&[
        "augment",
        "--config",
        golden.join("config.toml").to_str().unwrap(),
        "--backend",
        &format!("extractor={endpoint}"),
        "--backend",
        &format!("reasoner={endpoint}"),
        "--out",
        out_dir.to_str().unwrap(),
        "--cache-dir",
        dir.path().join("cache").to_str().unwrap(),
    ]);

    let train = read_augmented(&out_dir.join("augmented-train.jsonl")).unwrap();
    assert_eq!(
        train[0].expression.text,
        "However, meat floss is made of meatloaf instead of cotton."
    );
    let score = train[0].expression.selected.as_ref().unwrap().conflict_score;
    assert!((score - 0.853).abs() <= 1e-9);
    let expected = read_augmented(&golden.join("expected/augmented-train.jsonl")).unwrap();
    for (got, want) in train.iter().zip(&expected) {
        assert_eq!(got.expression, want.expression, "article {}", got.article_id);
        assert_eq!(got.augmented_text, want.augmented_text);
    }
}

/// The same corpus served by child processes speaking the stdio protocol
/// (the binary's own mock server, so the hop is real but deterministic).
#[test]
fn local_backend_round_trips_the_reference_corpus() {
    let golden = golden_dir();
    let fixture = golden.join("mock_backend.jsonl");
    let serve = format!(
        "local:{} mock-serve --fixture {}",
        env!("CARGO_BIN_EXE_mdpcc"),
        fixture.display()
    );

    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("out");
    run_ok(&[
        "augment",
        "--config",
        golden.join("config.toml").to_str().unwrap(),
        "--backend",
        &format!("extractor={serve}"),
        "--backend",
        &format!("reasoner={serve}"),
        "--out",
        out_dir.to_str().unwrap(),
        "--cache-dir",
        dir.path().join("cache").to_str().unwrap(),
    ]);

    let train = read_augmented(&out_dir.join("augmented-train.jsonl")).unwrap();
    let expected = read_augmented(&golden.join("expected/augmented-train.jsonl")).unwrap();
    assert_eq!(train.len(), expected.len());
    for (got, want) in train.iter().zip(&expected) {
        assert_eq!(got.expression, want.expression, "article {}", got.article_id);
        assert_eq!(got.augmented_text, want.augmented_text);
    }
}

/// Writes a corpus plus a mock fixture where each article has exactly one
/// extractable material claim; every other relation falls back to an
/// unparseable generation. Returns (corpus_dir, fixture_path).
fn write_bulk_environment(dir: &Path, per_split: [usize; 3]) -> (PathBuf, PathBuf) {
    let registry = default_registry();
    let spec = registry.get("MadeOf").unwrap();
    let examples = registry.examples("MadeOf");
    let corpus_dir = dir.join("corpus");
    std::fs::create_dir_all(&corpus_dir).unwrap();

    let mut mock_lines = Vec::new();
    for (name, count) in ["train", "val", "test"].iter().zip(per_split) {
        let mut lines = Vec::new();
        for i in 0..count {
            let fake = i % 2 == 0;
            let text = format!("Officials say product {name}{i} is made of plastic according to reports.");
            let subject = format!("product {name}{i}");
            let prompt = build_prompt(spec, examples, &text, 0).unwrap();
            let generation = format!("entity1 is {subject} and entity2 is plastic.");
            let tokens = generation.split_whitespace().count();
            mock_lines.push(
                serde_json::json!({"kind": "generate", "prompt": prompt, "text": generation, "logprobs": vec![-0.1; tokens]}).to_string(),
            );
            mock_lines.push(
                serde_json::json!({"kind": "object", "subject": subject, "relation": "MadeOf", "text": "steel", "logprobs": [-0.1]}).to_string(),
            );
            let p: f64 = if fake { 0.05 } else { 0.95 };
            mock_lines.push(
                serde_json::json!({"kind": "force", "subject": subject, "relation": "MadeOf", "target": "plastic", "logprobs": [p.ln()]}).to_string(),
            );
            lines.push(
                serde_json::json!({"id": format!("{name}-{i}"), "text": text, "label": u8::from(!fake)}).to_string(),
            );
        }
        let content = if lines.is_empty() {
            String::new()
        } else {
            lines.join("\n") + "\n"
        };
        std::fs::write(corpus_dir.join(format!("{name}.jsonl")), content).unwrap();
    }
    let fixture = dir.join("mock.jsonl");
    std::fs::write(&fixture, mock_lines.join("\n") + "\n").unwrap();
    (corpus_dir, fixture)
}

fn augment_args<'a>(
    corpus: &'a str,
    backend: &'a str,
    out: &'a str,
    cache: &'a str,
    extra: &'a [&'a str],
) -> Vec<String> {
    let mut args: Vec<String> = [
        "augment",
        "--corpus",
        corpus,
        "--backend",
        &format!("extractor={backend}") as &str,
        "--backend",
        &format!("reasoner={backend}") as &str,
        "--out",
        out,
        "--cache-dir",
        cache,
        "--k",
        "0",
    ]
    .iter()
    .map(ToString::to_string)
    .collect();
    args.extend(extra.iter().map(ToString::to_string));
    args
}

#[test]
fn worker_count_does_not_change_any_output_byte() {
    let dir = tempfile::tempdir().unwrap();
    let (corpus_dir, fixture) = write_bulk_environment(dir.path(), [16, 4, 4]);
    let backend = format!("mock:{}", fixture.display());

    let run = |label: &str, workers: &str| -> PathBuf {
        let out = dir.path().join(label);
        let args = augment_args(
            corpus_dir.to_str().unwrap(),
            &backend,
            out.to_str().unwrap(),
            dir.path().join(format!("cache-{label}")).to_str().unwrap(),
            &["--workers", workers],
        );
        run_ok(&args.iter().map(String::as_str).collect::<Vec<_>>());
        out
    };
    let serial = run("serial", "1");
    let parallel = run("parallel", "4");

    for name in [
        "augmented-train.jsonl",
        "augmented-val.jsonl",
        "augmented-test.jsonl",
        "audit-train.jsonl",
        "audit-val.jsonl",
        "audit-test.jsonl",
        "summary.json",
    ] {
        let a = std::fs::read(serial.join(name)).unwrap();
        let b = std::fs::read(parallel.join(name)).unwrap();
        assert!(a == b, "{name} differs between worker counts");
    }
}

#[test]
fn empty_corpus_augments_to_empty_outputs_and_exit_zero() {
    let dir = tempfile::tempdir().unwrap();
    let corpus_dir = dir.path().join("corpus");
    std::fs::create_dir_all(&corpus_dir).unwrap();
    for name in ["train", "val", "test"] {
        std::fs::write(corpus_dir.join(format!("{name}.jsonl")), "").unwrap();
    }
    let backend = format!("mock:{}", golden_dir().join("mock_backend.jsonl").display());
    let out_dir = dir.path().join("out");
    let args = augment_args(
        corpus_dir.to_str().unwrap(),
        &backend,
        out_dir.to_str().unwrap(),
        dir.path().join("cache").to_str().unwrap(),
        &[],
    );
    run_ok(&args.iter().map(String::as_str).collect::<Vec<_>>());

    for name in ["augmented-train.jsonl", "augmented-val.jsonl", "augmented-test.jsonl"] {
        let content = std::fs::read(out_dir.join(name)).unwrap();
        assert!(content.is_empty(), "{name} should be empty");
    }
    let summary: RunSummary =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("summary.json")).unwrap())
            .unwrap();
    assert_eq!(summary.splits.iter().map(|s| s.articles).sum::<usize>(), 0);
}

/// A backend outage mid-run exits with the environment code, but the work
/// already cached survives: the rerun only re-requests the articles the
/// outage swallowed.
#[test]
fn backend_outage_exits_two_and_the_rerun_resumes_from_cache() {
    let dir = tempfile::tempdir().unwrap();
    let (corpus_dir, _) = write_bulk_environment(dir.path(), [2, 0, 0]);

    // Rebuild the mock table in memory for the HTTP servers.
    let table = || {
        let src = std::fs::read_to_string(dir.path().join("mock.jsonl")).unwrap();
        MockTableBackend::from_jsonl_str("serve", &src).unwrap()
    };

    // Per article: one generation per relation in the registry, plus the
    // golden-object and force-decode calls for its one kept triplet.
    let per_article = default_registry().len() + 2;
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let port = listener.local_addr().unwrap().port();
    let endpoint = format!("remote:http://127.0.0.1:{port}");
    let first_served = Arc::new(AtomicUsize::new(0));
    spawn_model_server(listener, table(), Some(per_article), first_served.clone());

    let out_dir = dir.path().join("out");
    let cache_dir = dir.path().join("cache");
    let args = augment_args(
        corpus_dir.to_str().unwrap(),
        &endpoint,
        out_dir.to_str().unwrap(),
        cache_dir.to_str().unwrap(),
        &["--workers", "1"],
    );
    let args: Vec<&str> = args.iter().map(String::as_str).collect();

    let outage = run_raw(&args);
    assert_eq!(outage.status.code(), Some(2), "backend outage is an environment error");
    let stderr = String::from_utf8_lossy(&outage.stderr);
    assert!(stderr.contains("error:"), "stderr names the failure: {stderr}");
    assert_eq!(first_served.load(Ordering::SeqCst), per_article);

    // Same port, same backend identity, healthy server: the first
    // article's calls must come from the cache now.
    let listener = TcpListener::bind(("127.0.0.1", port)).expect("port rebinds");
    let second_served = Arc::new(AtomicUsize::new(0));
    spawn_model_server(listener, table(), None, second_served.clone());

    run_ok(&args);
    assert_eq!(
        second_served.load(Ordering::SeqCst),
        per_article,
        "rerun must only re-request the article the outage swallowed"
    );
    let summary: RunSummary =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("summary.json")).unwrap())
            .unwrap();
    assert_eq!(summary.record_cache_hits, 1);
    let train = read_augmented(&out_dir.join("augmented-train.jsonl")).unwrap();
    assert_eq!(train.len(), 2);
    assert!(train.iter().all(|r| !r.expression.text.is_empty()));
}

#[test]
fn eval_before_train_exits_two_through_the_binary() {
    let output = run_raw(&[
        "eval",
        "--corpus",
        golden_dir().join("corpus").to_str().unwrap(),
        "--raw",
        "--out",
        tempfile::tempdir().unwrap().path().join("out").to_str().unwrap(),
    ]);
    assert_eq!(output.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("mdpcc train"), "stderr names the fix: {stderr}");
}

/// Force-decoded scores travel the wire as logprobs, so a conflict score
/// computed across the HTTP hop must match the in-process mock exactly.
#[test]
fn wire_protocol_preserves_scores_bit_for_bit() {
    let mut mock = MockTableBackend::new("serve");
    mock.insert_object(
        "the bridge",
        "MadeOf",
        GenerationResult::from_text("steel", vec![-0.25]).unwrap(),
    );
    let awkward = -1.917_322_692_203_400_8_f64; // not exactly representable in decimal
    mock.insert_force("the bridge", "MadeOf", "paper", vec![awkward]).unwrap();

    let request = WireRequest::force(
        "the bridge",
        &mdpcc_core::relations::RelationId::from("MadeOf"),
        "paper",
    );
    let response = dispatch_wire(&mock, &request);
    let roundtrip: WireResponse =
        serde_json::from_str(&serde_json::to_string(&response).unwrap()).unwrap();
    assert_eq!(roundtrip.logprobs.as_deref(), Some(&[awkward][..]));
}
