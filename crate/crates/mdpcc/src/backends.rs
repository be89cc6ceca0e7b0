//! Backend plumbing for real deployments: a JSON-over-HTTP remote adapter,
//! a line-delimited-JSON subprocess adapter for locally hosted models, a
//! disk-caching wrapper, and the `ROLE=KIND` selection syntax used by the
//! CLI.
//!
//! All adapters speak the wire contract from [`mdpcc_core::backends`]:
//! requests are [`WireRequest`] values, responses are [`WireResponse`]
//! values, and anything that cannot produce per-token logprobs is rejected
//! as a capability failure rather than silently degraded.

use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use mdpcc_core::backends::{
    BackendError, ExtractorBackend, GenerationResult, MockTableBackend, ReasonerBackend,
    WireMode, WireRequest, WireResponse,
};
use mdpcc_core::relations::RelationId;
use serde::Deserialize;

use crate::cache::{sha256_hex, CachePlane, DiskCache};

/// Which pipeline role a backend serves.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackendRole {
    Extractor,
    Reasoner,
}

impl BackendRole {
    pub fn as_str(self) -> &'static str {
        match self {
            BackendRole::Extractor => "extractor",
            BackendRole::Reasoner => "reasoner",
        }
    }
}

/// How to construct a backend, as written in config files and `--backend`
/// flags: `mock:PATH`, `remote:URL`, or `local:CMD ARG...` (whitespace
/// split, no quoting).
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BackendKind {
    Mock(PathBuf),
    Remote(String),
    Local(Vec<String>),
}

impl BackendKind {
    /// Parses the `KIND` half of a backend spec.
    pub fn parse(kind: &str) -> Result<Self, String> {
        let (scheme, rest) = kind
            .split_once(':')
            .ok_or_else(|| format!("backend kind `{kind}` is not KIND:ARG"))?;
        let rest = rest.trim();
        if rest.is_empty() {
            return Err(format!("backend kind `{kind}` has an empty argument"));
        }
        match scheme {
            "mock" => Ok(BackendKind::Mock(PathBuf::from(rest))),
            "remote" => Ok(BackendKind::Remote(rest.to_string())),
            "local" => Ok(BackendKind::Local(
                rest.split_whitespace().map(str::to_string).collect(),
            )),
            other => Err(format!(
                "unknown backend kind `{other}` (expected mock, remote, or local)"
            )),
        }
    }
}

/// Parses one `--backend ROLE=KIND` flag value.
pub fn parse_backend_spec(spec: &str) -> Result<(BackendRole, BackendKind), String> {
    let (role, kind) = spec
        .split_once('=')
        .ok_or_else(|| format!("backend spec `{spec}` is not ROLE=KIND"))?;
    let role = match role.trim() {
        "extractor" => BackendRole::Extractor,
        "reasoner" => BackendRole::Reasoner,
        other => {
            return Err(format!(
                "unknown backend role `{other}` (expected extractor or reasoner)"
            ))
        }
    };
    Ok((role, BackendKind::parse(kind.trim())?))
}

/// Failures while constructing a backend (as opposed to using one); the CLI
/// maps these to the environment exit code.
#[derive(Debug, thiserror::Error)]
pub enum BackendSetupError {
    #[error("cannot read mock fixture {path}: {source}")]
    FixtureIo {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("mock fixture {path}: {source}")]
    FixtureParse {
        path: PathBuf,
        source: mdpcc_core::backends::MockFixtureError,
    },
    #[error("cannot spawn backend process `{command}`: {source}")]
    Spawn {
        command: String,
        source: std::io::Error,
    },
    #[error("backend process `{command}` failed to load: {reason}")]
    Handshake { command: String, reason: String },
}

/// JSON-over-HTTP adapter. Each call POSTs one [`WireRequest`] to the
/// endpoint and expects a [`WireResponse`] body. Transport failures (and
/// non-2xx statuses) are retried with exponential backoff up to the attempt
/// cap; a well-formed response that lacks usable logprobs is a capability
/// error and is not retried.
pub struct RemoteBackend {
    id: String,
    endpoint: String,
    agent: ureq::Agent,
    max_new_tokens: Option<u32>,
    attempts: u32,
    backoff: Duration,
}

impl RemoteBackend {
    pub const DEFAULT_ATTEMPTS: u32 = 3;
    pub const DEFAULT_BACKOFF: Duration = Duration::from_millis(200);

    pub fn new(
        endpoint: impl Into<String>,
        max_new_tokens: Option<u32>,
        attempts: u32,
        backoff: Duration,
    ) -> Self {
        let endpoint = endpoint.into();
        let config = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(60)))
            .build();
        Self {
            id: format!("remote:{endpoint}"),
            endpoint,
            agent: config.into(),
            max_new_tokens,
            attempts: attempts.max(1),
            backoff,
        }
    }

    fn send(&self, request: &WireRequest) -> Result<GenerationResult, BackendError> {
        let mut delay = self.backoff;
        let mut last_failure = String::new();
        for attempt in 0..self.attempts {
            if attempt > 0 {
                std::thread::sleep(delay);
                delay = delay.saturating_mul(2);
            }
            match self.agent.post(&self.endpoint).send_json(request) {
                Ok(mut response) => match response.body_mut().read_json::<WireResponse>() {
                    // A parsed response is the server's final answer:
                    // validation failures there are not retried.
                    Ok(wire) => return wire.into_result(),
                    Err(e) => last_failure = format!("malformed response body: {e}"),
                },
                Err(e) => last_failure = format!("request failed: {e}"),
            }
        }
        Err(BackendError::Unavailable {
            reason: format!(
                "{} after {} attempts: {last_failure}",
                self.endpoint, self.attempts
            ),
        })
    }
}

impl ExtractorBackend for RemoteBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn max_new_tokens(&self) -> Option<u32> {
        self.max_new_tokens
    }

    fn generate(&self, prompt: &str) -> Result<GenerationResult, BackendError> {
        self.send(&WireRequest::generate(prompt, self.max_new_tokens))
    }
}

impl ReasonerBackend for RemoteBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn max_new_tokens(&self) -> Option<u32> {
        self.max_new_tokens
    }

    fn generate_object(
        &self,
        subject: &str,
        relation: &RelationId,
    ) -> Result<GenerationResult, BackendError> {
        self.send(&WireRequest::object(subject, relation, self.max_new_tokens))
    }

    fn force_decode(
        &self,
        subject: &str,
        relation: &RelationId,
        target: &str,
    ) -> Result<GenerationResult, BackendError> {
        self.send(&WireRequest::force(subject, relation, target))
    }
}

#[derive(Debug, Deserialize)]
struct Handshake {
    status: String,
    #[serde(default)]
    message: Option<String>,
}

struct ChildBridge {
    child: Child,
    stdin: ChildStdin,
    stdout: BufReader<ChildStdout>,
}

/// Adapter for a locally hosted model served by a child process speaking
/// line-delimited JSON on stdio: one [`WireRequest`] per line in, one
/// [`WireResponse`] per line out. The child announces readiness with
/// `{"status":"ready"}` (or `{"status":"error","message":...}` when loading
/// failed, e.g. missing weights). Requests are serialized through a mutex;
/// the child is killed on drop.
pub struct LocalProcessBackend {
    id: String,
    command: String,
    max_new_tokens: Option<u32>,
    bridge: Mutex<ChildBridge>,
}

impl LocalProcessBackend {
    pub fn spawn(argv: &[String], max_new_tokens: Option<u32>) -> Result<Self, BackendSetupError> {
        let command = argv.join(" ");
        let (program, args) = argv.split_first().ok_or_else(|| BackendSetupError::Spawn {
            command: command.clone(),
            source: std::io::Error::new(std::io::ErrorKind::InvalidInput, "empty command line"),
        })?;
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()
            .map_err(|source| BackendSetupError::Spawn {
                command: command.clone(),
                source,
            })?;
        let stdin = child.stdin.take().expect("stdin was piped");
        let mut stdout = BufReader::new(child.stdout.take().expect("stdout was piped"));

        let mut line = String::new();
        let handshake_err = |reason: String| BackendSetupError::Handshake {
            command: command.clone(),
            reason,
        };
        stdout
            .read_line(&mut line)
            .map_err(|e| handshake_err(format!("reading handshake: {e}")))?;
        if line.is_empty() {
            return Err(handshake_err("process exited before handshake".into()));
        }
        let handshake: Handshake = serde_json::from_str(line.trim())
            .map_err(|e| handshake_err(format!("malformed handshake `{}`: {e}", line.trim())))?;
        if handshake.status != "ready" {
            return Err(handshake_err(
                handshake.message.unwrap_or_else(|| handshake.status.clone()),
            ));
        }

        Ok(Self {
            id: format!("local:{command}"),
            command,
            max_new_tokens,
            bridge: Mutex::new(ChildBridge {
                child,
                stdin,
                stdout,
            }),
        })
    }

    fn send(&self, request: &WireRequest) -> Result<GenerationResult, BackendError> {
        let mut bridge = self
            .bridge
            .lock()
            .unwrap_or_else(|poisoned| poisoned.into_inner());
        let unavailable = |reason: String| BackendError::Unavailable { reason };
        let payload = request.canonical_json();
        bridge
            .stdin
            .write_all(payload.as_bytes())
            .and_then(|()| bridge.stdin.write_all(b"\n"))
            .and_then(|()| bridge.stdin.flush())
            .map_err(|e| unavailable(format!("writing to `{}`: {e}", self.command)))?;
        let mut line = String::new();
        bridge
            .stdout
            .read_line(&mut line)
            .map_err(|e| unavailable(format!("reading from `{}`: {e}", self.command)))?;
        if line.is_empty() {
            let status = bridge
                .child
                .try_wait()
                .ok()
                .flatten()
                .map(|s| format!(" (exit: {s})"))
                .unwrap_or_default();
            return Err(unavailable(format!(
                "backend process `{}` closed its output{status}",
                self.command
            )));
        }
        let wire: WireResponse = serde_json::from_str(line.trim()).map_err(|e| {
            unavailable(format!("malformed response from `{}`: {e}", self.command))
        })?;
        wire.into_result()
    }
}

impl Drop for LocalProcessBackend {
    fn drop(&mut self) {
        if let Ok(bridge) = self.bridge.get_mut() {
            let _ = bridge.child.kill();
            let _ = bridge.child.wait();
        }
    }
}

impl ExtractorBackend for LocalProcessBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn max_new_tokens(&self) -> Option<u32> {
        self.max_new_tokens
    }

    fn generate(&self, prompt: &str) -> Result<GenerationResult, BackendError> {
        self.send(&WireRequest::generate(prompt, self.max_new_tokens))
    }
}

impl ReasonerBackend for LocalProcessBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn max_new_tokens(&self) -> Option<u32> {
        self.max_new_tokens
    }

    fn generate_object(
        &self,
        subject: &str,
        relation: &RelationId,
    ) -> Result<GenerationResult, BackendError> {
        self.send(&WireRequest::object(subject, relation, self.max_new_tokens))
    }

    fn force_decode(
        &self,
        subject: &str,
        relation: &RelationId,
        target: &str,
    ) -> Result<GenerationResult, BackendError> {
        self.send(&WireRequest::force(subject, relation, target))
    }
}

/// Any concrete backend the CLI can construct.
pub enum AnyBackend {
    Mock(MockTableBackend),
    Remote(RemoteBackend),
    Local(LocalProcessBackend),
}

impl AnyBackend {
    fn id_str(&self) -> &str {
        match self {
            AnyBackend::Mock(b) => ExtractorBackend::id(b),
            AnyBackend::Remote(b) => ExtractorBackend::id(b),
            AnyBackend::Local(b) => ExtractorBackend::id(b),
        }
    }
}

impl ExtractorBackend for AnyBackend {
    fn id(&self) -> &str {
        self.id_str()
    }

    fn max_new_tokens(&self) -> Option<u32> {
        match self {
            AnyBackend::Mock(b) => ExtractorBackend::max_new_tokens(b),
            AnyBackend::Remote(b) => ExtractorBackend::max_new_tokens(b),
            AnyBackend::Local(b) => ExtractorBackend::max_new_tokens(b),
        }
    }

    fn generate(&self, prompt: &str) -> Result<GenerationResult, BackendError> {
        match self {
            AnyBackend::Mock(b) => b.generate(prompt),
            AnyBackend::Remote(b) => b.generate(prompt),
            AnyBackend::Local(b) => b.generate(prompt),
        }
    }
}

impl ReasonerBackend for AnyBackend {
    fn id(&self) -> &str {
        self.id_str()
    }

    fn max_new_tokens(&self) -> Option<u32> {
        match self {
            AnyBackend::Mock(b) => ReasonerBackend::max_new_tokens(b),
            AnyBackend::Remote(b) => ReasonerBackend::max_new_tokens(b),
            AnyBackend::Local(b) => ReasonerBackend::max_new_tokens(b),
        }
    }

    fn generate_object(
        &self,
        subject: &str,
        relation: &RelationId,
    ) -> Result<GenerationResult, BackendError> {
        match self {
            AnyBackend::Mock(b) => b.generate_object(subject, relation),
            AnyBackend::Remote(b) => b.generate_object(subject, relation),
            AnyBackend::Local(b) => b.generate_object(subject, relation),
        }
    }

    fn force_decode(
        &self,
        subject: &str,
        relation: &RelationId,
        target: &str,
    ) -> Result<GenerationResult, BackendError> {
        match self {
            AnyBackend::Mock(b) => b.force_decode(subject, relation, target),
            AnyBackend::Remote(b) => b.force_decode(subject, relation, target),
            AnyBackend::Local(b) => b.force_decode(subject, relation, target),
        }
    }
}

/// Builds a backend from its kind. `base_dir` anchors relative fixture
/// paths. Mock backends are identified by the fixture's file name (not its
/// full path) so cache keys and records stay stable across checkouts.
pub fn build_backend(
    kind: &BackendKind,
    base_dir: &Path,
    max_new_tokens: Option<u32>,
) -> Result<AnyBackend, BackendSetupError> {
    match kind {
        BackendKind::Mock(path) => {
            let resolved = if path.is_absolute() {
                path.clone()
            } else {
                base_dir.join(path)
            };
            let src = std::fs::read_to_string(&resolved).map_err(|source| {
                BackendSetupError::FixtureIo {
                    path: resolved.clone(),
                    source,
                }
            })?;
            let name = resolved
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| "fixture".to_string());
            let mock = MockTableBackend::from_jsonl_str(format!("mock:{name}"), &src).map_err(
                |source| BackendSetupError::FixtureParse {
                    path: resolved,
                    source,
                },
            )?;
            Ok(AnyBackend::Mock(mock))
        }
        BackendKind::Remote(url) => Ok(AnyBackend::Remote(RemoteBackend::new(
            url.clone(),
            max_new_tokens,
            RemoteBackend::DEFAULT_ATTEMPTS,
            RemoteBackend::DEFAULT_BACKOFF,
        ))),
        BackendKind::Local(argv) => Ok(AnyBackend::Local(LocalProcessBackend::spawn(
            argv,
            max_new_tokens,
        )?)),
    }
}

/// Caching wrapper: serves repeated requests from the generation plane of a
/// [`DiskCache`] keyed by backend id + canonical request JSON. Only
/// successful results are cached; errors always reach the caller fresh.
/// `inner_calls` counts how often the wrapped backend actually ran — the
/// number the augment summary reports as backend calls.
pub struct Cached<B> {
    inner: B,
    cache: Option<Arc<DiskCache>>,
    hits: AtomicU64,
    inner_calls: AtomicU64,
}

impl<B> Cached<B> {
    pub fn new(inner: B, cache: Option<Arc<DiskCache>>) -> Self {
        Self {
            inner,
            cache,
            hits: AtomicU64::new(0),
            inner_calls: AtomicU64::new(0),
        }
    }

    pub fn hits(&self) -> u64 {
        self.hits.load(Ordering::Relaxed)
    }

    pub fn inner_calls(&self) -> u64 {
        self.inner_calls.load(Ordering::Relaxed)
    }

    pub fn inner(&self) -> &B {
        &self.inner
    }

    fn key(&self, id: &str, request: &WireRequest) -> String {
        sha256_hex(&[id.as_bytes(), request.canonical_json().as_bytes()])
    }

    fn lookup(&self, id: &str, request: &WireRequest) -> Option<GenerationResult> {
        let cache = self.cache.as_ref()?;
        let key = self.key(id, request);
        let wire: WireResponse = cache.get_json(CachePlane::Generation, &key)?;
        match wire.into_result() {
            Ok(result) => {
                self.hits.fetch_add(1, Ordering::Relaxed);
                Some(result)
            }
            Err(_) => {
                // Semantically corrupt entry: evict and treat as a miss.
                cache.evict(CachePlane::Generation, &key);
                None
            }
        }
    }

    fn store(&self, id: &str, request: &WireRequest, result: &GenerationResult) {
        if let Some(cache) = &self.cache {
            let key = self.key(id, request);
            let _ = cache.put_json(
                CachePlane::Generation,
                &key,
                &WireResponse::from_result(result),
            );
        }
    }
}

impl<B: ExtractorBackend> ExtractorBackend for Cached<B> {
    fn id(&self) -> &str {
        self.inner.id()
    }

    fn max_new_tokens(&self) -> Option<u32> {
        self.inner.max_new_tokens()
    }

    fn generate(&self, prompt: &str) -> Result<GenerationResult, BackendError> {
        let request = WireRequest::generate(prompt, self.inner.max_new_tokens());
        if let Some(result) = self.lookup(self.inner.id(), &request) {
            return Ok(result);
        }
        self.inner_calls.fetch_add(1, Ordering::Relaxed);
        let result = self.inner.generate(prompt)?;
        self.store(self.inner.id(), &request, &result);
        Ok(result)
    }
}

impl<B: ReasonerBackend> ReasonerBackend for Cached<B> {
    fn id(&self) -> &str {
        self.inner.id()
    }

    fn max_new_tokens(&self) -> Option<u32> {
        self.inner.max_new_tokens()
    }

    fn generate_object(
        &self,
        subject: &str,
        relation: &RelationId,
    ) -> Result<GenerationResult, BackendError> {
        let request = WireRequest::object(subject, relation, self.inner.max_new_tokens());
        if let Some(result) = self.lookup(self.inner.id(), &request) {
            return Ok(result);
        }
        self.inner_calls.fetch_add(1, Ordering::Relaxed);
        let result = self.inner.generate_object(subject, relation)?;
        self.store(self.inner.id(), &request, &result);
        Ok(result)
    }

    fn force_decode(
        &self,
        subject: &str,
        relation: &RelationId,
        target: &str,
    ) -> Result<GenerationResult, BackendError> {
        let request = WireRequest::force(subject, relation, target);
        if let Some(result) = self.lookup(self.inner.id(), &request) {
            return Ok(result);
        }
        self.inner_calls.fetch_add(1, Ordering::Relaxed);
        let result = self.inner.force_decode(subject, relation, target)?;
        self.store(self.inner.id(), &request, &result);
        Ok(result)
    }
}

/// Dispatches one wire request against a backend serving both roles; the
/// shared body of every server shim (`mock-serve`, the Python runner).
pub fn dispatch_wire<B: ExtractorBackend + ReasonerBackend>(
    backend: &B,
    request: &WireRequest,
) -> WireResponse {
    let missing = |what: &str, mode: &str| BackendError::InvalidRequest {
        reason: format!("{mode} request is missing `{what}`"),
    };
    let result = match request.mode {
        WireMode::Generate => request
            .prompt
            .as_deref()
            .ok_or_else(|| missing("prompt", "generate"))
            .and_then(|prompt| backend.generate(prompt)),
        WireMode::Object => {
            let subject = request.subject.as_deref();
            let relation = request.relation.as_deref();
            match (subject, relation) {
                (Some(s), Some(r)) => backend.generate_object(s, &RelationId::from(r)),
                (None, _) => Err(missing("subject", "object")),
                (_, None) => Err(missing("relation", "object")),
            }
        }
        WireMode::Force => {
            let subject = request.subject.as_deref();
            let relation = request.relation.as_deref();
            let target = request.target.as_deref();
            match (subject, relation, target) {
                (Some(s), Some(r), Some(t)) => backend.force_decode(s, &RelationId::from(r), t),
                (None, _, _) => Err(missing("subject", "force")),
                (_, None, _) => Err(missing("relation", "force")),
                (_, _, None) => Err(missing("target", "force")),
            }
        }
    };
    match result {
        Ok(generation) => WireResponse::from_result(&generation),
        Err(error) => WireResponse {
            text: String::new(),
            tokens: None,
            logprobs: None,
            error: Some(error.to_string()),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Read;
    use std::net::TcpListener;

    fn mock_with_one_prompt() -> MockTableBackend {
        let mut mock = MockTableBackend::new("mock:test");
        mock.insert_generation(
            "P1",
            GenerationResult::from_text("entity1 is a and entity2 is b.", vec![-0.1; 7]).unwrap(),
        );
        mock
    }

    #[test]
    fn backend_specs_parse() {
        assert_eq!(
            parse_backend_spec("extractor=mock:fixtures/m.jsonl").unwrap(),
            (
                BackendRole::Extractor,
                BackendKind::Mock(PathBuf::from("fixtures/m.jsonl"))
            )
        );
        assert_eq!(
            parse_backend_spec("reasoner=remote:http://127.0.0.1:9000/v1").unwrap(),
            (
                BackendRole::Reasoner,
                BackendKind::Remote("http://127.0.0.1:9000/v1".into())
            )
        );
        assert_eq!(
            parse_backend_spec("extractor=local:python runner.py --model t5").unwrap(),
            (
                BackendRole::Extractor,
                BackendKind::Local(vec![
                    "python".into(),
                    "runner.py".into(),
                    "--model".into(),
                    "t5".into()
                ])
            )
        );
        assert!(parse_backend_spec("extractor").is_err());
        assert!(parse_backend_spec("driver=mock:x").is_err());
        assert!(parse_backend_spec("extractor=ftp:x").is_err());
        assert!(parse_backend_spec("extractor=mock:").is_err());
    }

    #[test]
    fn cached_wrapper_serves_second_call_from_disk() {
        let dir = tempfile::tempdir().unwrap();
        let cache = Arc::new(DiskCache::open(dir.path()).unwrap());
        let cached = Cached::new(mock_with_one_prompt(), Some(cache));

        let first = cached.generate("P1").unwrap();
        assert_eq!(cached.inner_calls(), 1);
        assert_eq!(cached.hits(), 0);
        assert_eq!(cached.inner().generate_calls("P1"), 1);

        let second = cached.generate("P1").unwrap();
        assert_eq!(second, first);
        assert_eq!(cached.inner_calls(), 1, "second call must not reach the mock");
        assert_eq!(cached.hits(), 1);
        assert_eq!(cached.inner().generate_calls("P1"), 1);
    }

    #[test]
    fn cache_key_separates_backends_and_requests() {
        let dir = tempfile::tempdir().unwrap();
        let cache = Arc::new(DiskCache::open(dir.path()).unwrap());
        let cached = Cached::new(mock_with_one_prompt(), Some(cache.clone()));
        cached.generate("P1").unwrap();
        cached.generate("P2").unwrap(); // fallback answer, cached separately
        assert_eq!(cached.inner_calls(), 2);

        // A different backend id misses even on the same prompt.
        let mut other = MockTableBackend::new("mock:other");
        other.insert_generation(
            "P1",
            GenerationResult::from_text("different", vec![-0.3]).unwrap(),
        );
        let cached_other = Cached::new(other, Some(cache));
        let result = cached_other.generate("P1").unwrap();
        assert_eq!(result.text, "different");
        assert_eq!(cached_other.inner_calls(), 1);
        assert_eq!(cached_other.hits(), 0);
    }

    #[test]
    fn uncached_wrapper_always_calls_inner() {
        let cached = Cached::new(mock_with_one_prompt(), None);
        cached.generate("P1").unwrap();
        cached.generate("P1").unwrap();
        assert_eq!(cached.inner_calls(), 2);
        assert_eq!(cached.hits(), 0);
    }

    #[test]
    fn reasoner_calls_cache_too() {
        let dir = tempfile::tempdir().unwrap();
        let cache = Arc::new(DiskCache::open(dir.path()).unwrap());
        let mut mock = MockTableBackend::new("mock:test");
        mock.insert_object(
            "meat floss",
            "MadeOf",
            GenerationResult::from_text("meatloaf", vec![-0.2]).unwrap(),
        );
        mock.insert_force(
            "meat floss",
            "MadeOf",
            "cotton",
            vec![(0.147f64).ln()],
        )
        .unwrap();
        let cached = Cached::new(mock, Some(cache));
        let relation = RelationId::from("MadeOf");

        let golden1 = cached.generate_object("meat floss", &relation).unwrap();
        let golden2 = cached.generate_object("meat floss", &relation).unwrap();
        assert_eq!(golden1, golden2);
        let forced1 = cached.force_decode("meat floss", &relation, "cotton").unwrap();
        let forced2 = cached.force_decode("meat floss", &relation, "cotton").unwrap();
        assert_eq!(forced1, forced2);
        assert_eq!(cached.inner_calls(), 2);
        assert_eq!(cached.hits(), 2);
    }

    struct FailingBackend;

    impl ExtractorBackend for FailingBackend {
        fn id(&self) -> &str {
            "failing"
        }
        fn generate(&self, _prompt: &str) -> Result<GenerationResult, BackendError> {
            Err(BackendError::Unavailable {
                reason: "down".into(),
            })
        }
    }

    #[test]
    fn errors_are_never_cached() {
        let dir = tempfile::tempdir().unwrap();
        let cache = Arc::new(DiskCache::open(dir.path()).unwrap());
        let cached = Cached::new(FailingBackend, Some(cache));
        assert!(cached.generate("P").is_err());
        assert!(cached.generate("P").is_err());
        assert_eq!(cached.inner_calls(), 2);
        let entries = std::fs::read_dir(dir.path().join("gen")).unwrap().count();
        assert_eq!(entries, 0);
    }

    /// Minimal HTTP/1.1 server thread: answers `responses` in order, one
    /// connection each, then stops.
    fn spawn_http_server(responses: Vec<Option<String>>) -> (String, std::thread::JoinHandle<()>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let handle = std::thread::spawn(move || {
            for response in responses {
                let (mut stream, _) = listener.accept().unwrap();
                let mut buf = Vec::new();
                let mut byte = [0u8; 1];
                // Read headers.
                while !buf.ends_with(b"\r\n\r\n") {
                    if stream.read(&mut byte).unwrap() == 0 {
                        break;
                    }
                    buf.push(byte[0]);
                }
                let headers = String::from_utf8_lossy(&buf).to_ascii_lowercase();
                let content_length: usize = headers
                    .lines()
                    .find_map(|l| l.strip_prefix("content-length:"))
                    .and_then(|v| v.trim().parse().ok())
                    .unwrap_or(0);
                let mut body = vec![0u8; content_length];
                stream.read_exact(&mut body).unwrap();
                match response {
                    Some(body) => {
                        let reply = format!(
                            "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{}",
                            body.len(),
                            body
                        );
                        stream.write_all(reply.as_bytes()).unwrap();
                    }
                    None => drop(stream), // slam the connection shut
                }
            }
        });
        (format!("http://{addr}"), handle)
    }

    #[test]
    fn remote_backend_round_trips_a_generation() {
        let body = r#"{"text":"entity1 is a and entity2 is b.","tokens":["entity1","is","a","and","entity2","is","b."],"logprobs":[-0.1,-0.1,-0.1,-0.1,-0.1,-0.1,-0.1]}"#;
        let (url, server) = spawn_http_server(vec![Some(body.to_string())]);
        let backend = RemoteBackend::new(url, Some(32), 1, Duration::from_millis(1));
        let result = backend.generate("P1").unwrap();
        assert_eq!(result.text, "entity1 is a and entity2 is b.");
        assert_eq!(result.tokens.len(), 7);
        server.join().unwrap();
    }

    #[test]
    fn remote_backend_retries_transport_failures() {
        let body = r#"{"text":"ok","tokens":["ok"],"logprobs":[-0.5]}"#;
        let (url, server) =
            spawn_http_server(vec![None, None, Some(body.to_string())]);
        let backend = RemoteBackend::new(url, None, 3, Duration::from_millis(1));
        let result = backend.generate("P").unwrap();
        assert_eq!(result.text, "ok");
        server.join().unwrap();
    }

    #[test]
    fn remote_backend_reports_unavailable_after_attempt_cap() {
        let (url, server) = spawn_http_server(vec![None, None, None]);
        let backend = RemoteBackend::new(url, None, 3, Duration::from_millis(1));
        match backend.generate("P") {
            Err(BackendError::Unavailable { reason }) => {
                assert!(reason.contains("3 attempts"), "{reason}");
            }
            other => panic!("expected Unavailable, got {other:?}"),
        }
        server.join().unwrap();
    }

    #[test]
    fn remote_backend_missing_logprobs_is_capability_not_retry() {
        // One connection only: a capability failure must not burn retries.
        let body = r#"{"text":"ok","tokens":["ok"]}"#;
        let (url, server) = spawn_http_server(vec![Some(body.to_string())]);
        let backend = RemoteBackend::new(url, None, 3, Duration::from_millis(1));
        match backend.generate("P") {
            Err(BackendError::Capability { reason }) => {
                assert!(reason.contains("logprobs"), "{reason}");
            }
            other => panic!("expected Capability, got {other:?}"),
        }
        server.join().unwrap();
    }

    #[test]
    fn local_backend_speaks_line_json() {
        let script = r#"printf '%s\n' '{"status":"ready"}'; while IFS= read -r line; do printf '%s\n' '{"text":"ok","tokens":["ok"],"logprobs":[-0.5]}'; done"#;
        let argv = vec!["sh".to_string(), "-c".to_string(), script.to_string()];
        let backend = LocalProcessBackend::spawn(&argv, Some(32)).unwrap();
        let result = backend.generate("anything").unwrap();
        assert_eq!(result.text, "ok");
        let again = backend
            .force_decode("s", &RelationId::from("MadeOf"), "t")
            .unwrap();
        assert_eq!(again.text, "ok");
    }

    #[test]
    fn local_backend_load_failure_surfaces_the_message() {
        let script = r#"printf '%s\n' '{"status":"error","message":"weights not found"}'; exit 3"#;
        let argv = vec!["sh".to_string(), "-c".to_string(), script.to_string()];
        match LocalProcessBackend::spawn(&argv, None) {
            Err(BackendSetupError::Handshake { reason, .. }) => {
                assert!(reason.contains("weights not found"), "{reason}");
            }
            other => panic!("expected handshake error, got {:?}", other.err()),
        }
    }

    #[test]
    fn local_backend_death_mid_run_is_unavailable() {
        let script = r#"printf '%s\n' '{"status":"ready"}'"#;
        let argv = vec!["sh".to_string(), "-c".to_string(), script.to_string()];
        let backend = LocalProcessBackend::spawn(&argv, None).unwrap();
        std::thread::sleep(Duration::from_millis(50)); // let it exit
        // Depending on timing the failure is a broken-pipe write or an EOF
        // read; both must surface as Unavailable.
        match backend.generate("P") {
            Err(BackendError::Unavailable { .. }) => {}
            other => panic!("expected Unavailable, got {other:?}"),
        }
    }

    #[test]
    fn wire_dispatch_covers_all_modes_and_errors() {
        let mut mock = mock_with_one_prompt();
        mock.insert_force("s", "MadeOf", "t", vec![-0.7]).unwrap();
        let ok = dispatch_wire(&mock, &WireRequest::generate("P1", None));
        assert!(ok.error.is_none());
        assert_eq!(ok.text, "entity1 is a and entity2 is b.");

        let forced = dispatch_wire(&mock, &WireRequest::force("s", &RelationId::from("MadeOf"), "t"));
        assert_eq!(forced.logprobs, Some(vec![-0.7]));

        let bad = dispatch_wire(
            &mock,
            &WireRequest {
                mode: WireMode::Generate,
                prompt: None,
                subject: None,
                relation: None,
                target: None,
                max_new_tokens: None,
            },
        );
        assert!(bad.error.unwrap().contains("missing `prompt`"));
    }
}
