//! Model-backend interfaces: the generative extractor, the commonsense
//! reasoner, and a deterministic table-driven mock that lets the whole
//! pipeline run with no model weights.
//!
//! All probabilities are natural-log token log-probabilities. Decoding is
//! greedy with a max-new-tokens cap wherever a real model is involved; the
//! cap travels inside [`WireRequest`] so caches key on it.
//!
//! The JSON wire contract shared by the remote HTTP backend, the subprocess
//! backend, and the mock stdio server is defined here ([`WireRequest`] /
//! [`WireResponse`]) so there is exactly one source of truth for it.

use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::sync::atomic::{AtomicU64, Ordering};

use alloc::collections::BTreeMap;
use serde::{Deserialize, Serialize};

use crate::relations::RelationId;

/// One model call's outcome: the generated (or force-decoded) text, its
/// tokens, and their conditional log-probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationResult {
    pub text: String,
    pub tokens: Vec<String>,
    pub token_logprobs: Vec<f64>,
}

impl GenerationResult {
    /// Builds a validated result: token and logprob counts must match, and
    /// every logprob must be finite and ≤ 0.
    pub fn new(
        text: impl Into<String>,
        tokens: Vec<String>,
        token_logprobs: Vec<f64>,
    ) -> Result<Self, BackendError> {
        let result = Self {
            text: text.into(),
            tokens,
            token_logprobs,
        };
        result.validate()?;
        Ok(result)
    }

    /// Convenience constructor: tokens are the whitespace split of `text`
    /// (the detokenization rule used by the mock and the stdio runner).
    pub fn from_text(text: impl Into<String>, token_logprobs: Vec<f64>) -> Result<Self, BackendError> {
        let text = text.into();
        let tokens = whitespace_tokens(&text);
        Self::new(text, tokens, token_logprobs)
    }

    fn validate(&self) -> Result<(), BackendError> {
        if self.tokens.len() != self.token_logprobs.len() {
            return Err(BackendError::Capability {
                reason: alloc::format!(
                    "{} tokens but {} logprobs",
                    self.tokens.len(),
                    self.token_logprobs.len()
                ),
            });
        }
        for &lp in &self.token_logprobs {
            if !lp.is_finite() || lp > 0.0 {
                return Err(BackendError::Capability {
                    reason: alloc::format!("logprob {lp} is not a finite value ≤ 0"),
                });
            }
        }
        Ok(())
    }

    /// Mean token log-probability; `None` for empty generations.
    pub fn mean_logprob(&self) -> Option<f64> {
        if self.token_logprobs.is_empty() {
            return None;
        }
        let sum: f64 = self.token_logprobs.iter().sum();
        Some(sum / self.token_logprobs.len() as f64)
    }
}

/// Whitespace tokenization used by table-driven backends.
pub fn whitespace_tokens(text: &str) -> Vec<String> {
    text.split_whitespace().map(ToString::to_string).collect()
}

/// Failures surfaced by any backend implementation.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum BackendError {
    /// The backend cannot be reached (network down, process died, retries
    /// exhausted). The pipeline treats this as an environment failure.
    #[error("backend unavailable: {reason}")]
    Unavailable { reason: String },
    /// The backend answered, but not with usable token logprobs (missing
    /// fields, length mismatch, probabilities > 1).
    #[error("backend capability: {reason}")]
    Capability { reason: String },
    /// The caller asked for something ill-formed (e.g. force-decoding an
    /// empty target).
    #[error("invalid backend request: {reason}")]
    InvalidRequest { reason: String },
}

/// Generative extractor interface: prompt in, generation out.
pub trait ExtractorBackend: Send + Sync {
    /// Stable identifier of this backend configuration; participates in
    /// cache keys and augmentation records.
    fn id(&self) -> &str;

    /// Decoding cap advertised by this backend, if it decodes at all.
    fn max_new_tokens(&self) -> Option<u32> {
        None
    }

    fn generate(&self, prompt: &str) -> Result<GenerationResult, BackendError>;
}

/// Commonsense reasoner interface: golden-object generation plus forced
/// scoring of an arbitrary target continuation.
pub trait ReasonerBackend: Send + Sync {
    fn id(&self) -> &str;

    fn max_new_tokens(&self) -> Option<u32> {
        None
    }

    /// Greedy generation of the golden object for `(subject, relation)`.
    fn generate_object(
        &self,
        subject: &str,
        relation: &RelationId,
    ) -> Result<GenerationResult, BackendError>;

    /// Teacher-forces `target` through the reasoner conditioned on
    /// `(subject, relation)`. The result's tokens exactly tile `target`.
    fn force_decode(
        &self,
        subject: &str,
        relation: &RelationId,
        target: &str,
    ) -> Result<GenerationResult, BackendError>;
}

impl<T: ExtractorBackend + ?Sized> ExtractorBackend for &T {
    fn id(&self) -> &str {
        (**self).id()
    }
    fn max_new_tokens(&self) -> Option<u32> {
        (**self).max_new_tokens()
    }
    fn generate(&self, prompt: &str) -> Result<GenerationResult, BackendError> {
        (**self).generate(prompt)
    }
}

impl<T: ReasonerBackend + ?Sized> ReasonerBackend for &T {
    fn id(&self) -> &str {
        (**self).id()
    }
    fn max_new_tokens(&self) -> Option<u32> {
        (**self).max_new_tokens()
    }
    fn generate_object(
        &self,
        subject: &str,
        relation: &RelationId,
    ) -> Result<GenerationResult, BackendError> {
        (**self).generate_object(subject, relation)
    }
    fn force_decode(
        &self,
        subject: &str,
        relation: &RelationId,
        target: &str,
    ) -> Result<GenerationResult, BackendError> {
        (**self).force_decode(subject, relation, target)
    }
}

impl<T: ExtractorBackend + ?Sized> ExtractorBackend for alloc::boxed::Box<T> {
    fn id(&self) -> &str {
        (**self).id()
    }
    fn max_new_tokens(&self) -> Option<u32> {
        (**self).max_new_tokens()
    }
    fn generate(&self, prompt: &str) -> Result<GenerationResult, BackendError> {
        (**self).generate(prompt)
    }
}

impl<T: ReasonerBackend + ?Sized> ReasonerBackend for alloc::boxed::Box<T> {
    fn id(&self) -> &str {
        (**self).id()
    }
    fn max_new_tokens(&self) -> Option<u32> {
        (**self).max_new_tokens()
    }
    fn generate_object(
        &self,
        subject: &str,
        relation: &RelationId,
    ) -> Result<GenerationResult, BackendError> {
        (**self).generate_object(subject, relation)
    }
    fn force_decode(
        &self,
        subject: &str,
        relation: &RelationId,
        target: &str,
    ) -> Result<GenerationResult, BackendError> {
        (**self).force_decode(subject, relation, target)
    }
}

/// Request shape of the JSON wire contract (HTTP body or one stdio line).
///
/// Exactly one of the three shapes is populated:
/// - `mode: "generate"` with `prompt`
/// - `mode: "object"` with `subject` + `relation`
/// - `mode: "force"` with `subject` + `relation` + `target`
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireRequest {
    pub mode: WireMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subject: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relation: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_new_tokens: Option<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WireMode {
    Generate,
    Object,
    Force,
}

impl WireRequest {
    pub fn generate(prompt: &str, max_new_tokens: Option<u32>) -> Self {
        Self {
            mode: WireMode::Generate,
            prompt: Some(prompt.to_string()),
            subject: None,
            relation: None,
            target: None,
            max_new_tokens,
        }
    }

    pub fn object(subject: &str, relation: &RelationId, max_new_tokens: Option<u32>) -> Self {
        Self {
            mode: WireMode::Object,
            prompt: None,
            subject: Some(subject.to_string()),
            relation: Some(relation.to_string()),
            target: None,
            max_new_tokens,
        }
    }

    pub fn force(subject: &str, relation: &RelationId, target: &str) -> Self {
        Self {
            mode: WireMode::Force,
            prompt: None,
            subject: Some(subject.to_string()),
            relation: Some(relation.to_string()),
            target: Some(target.to_string()),
            max_new_tokens: None,
        }
    }

    /// Canonical JSON encoding (declaration field order, no holes); the
    /// cache digests exactly these bytes together with the backend id.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("wire request serializes")
    }
}

/// Response shape of the JSON wire contract.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireResponse {
    #[serde(default)]
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tokens: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logprobs: Option<Vec<f64>>,
    /// Server-reported failure; when set, the other fields are ignored.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl WireResponse {
    pub fn from_result(result: &GenerationResult) -> Self {
        Self {
            text: result.text.clone(),
            tokens: Some(result.tokens.clone()),
            logprobs: Some(result.token_logprobs.clone()),
            error: None,
        }
    }

    /// Validates the response into a [`GenerationResult`]. Missing token
    /// logprobs are a capability failure: such a backend cannot serve the
    /// perplexity filter or conflict scoring.
    pub fn into_result(self) -> Result<GenerationResult, BackendError> {
        if let Some(error) = self.error {
            return Err(BackendError::Unavailable { reason: error });
        }
        let tokens = self.tokens.ok_or_else(|| BackendError::Capability {
            reason: "response is missing tokens".to_string(),
        })?;
        let logprobs = self.logprobs.ok_or_else(|| BackendError::Capability {
            reason: "response is missing token logprobs".to_string(),
        })?;
        GenerationResult::new(self.text, tokens, logprobs)
    }
}

/// Fixture-loading errors for the mock backend.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MockFixtureError {
    #[error("line {line}: malformed mock record: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: invalid mock record: {reason}")]
    Invalid { line: usize, reason: String },
    #[error("line {line}: duplicate mock key")]
    Duplicate { line: usize },
}

#[derive(Debug)]
struct MockEntry {
    result: GenerationResult,
    calls: AtomicU64,
}

impl MockEntry {
    fn new(result: GenerationResult) -> Self {
        Self {
            result,
            calls: AtomicU64::new(0),
        }
    }

    fn hit(&self) -> GenerationResult {
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.result.clone()
    }
}

/// Deterministic backend answering from fixed lookup tables. Implements both
/// [`ExtractorBackend`] and [`ReasonerBackend`]; unknown keys answer with a
/// fallback result and are counted, so cache tests can assert exact call
/// counts and fixture gaps stay visible.
///
/// Fixture grammar (JSONL, `tokens` optional — defaults to the whitespace
/// split of `text`):
///
/// ```text
/// {"kind":"generate","prompt":"...","text":"...","logprobs":[-0.1,...]}
/// {"kind":"object","subject":"...","relation":"MadeOf","text":"...","logprobs":[-0.2]}
/// {"kind":"force","subject":"...","relation":"MadeOf","target":"cotton","logprobs":[-1.9]}
/// {"kind":"fallback","text":"none","logprobs":[-2.0],"force_logprob":-2.0}
/// ```
#[derive(Debug)]
pub struct MockTableBackend {
    id: String,
    generations: BTreeMap<String, MockEntry>,
    objects: BTreeMap<String, MockEntry>,
    forces: BTreeMap<String, MockEntry>,
    fallback: GenerationResult,
    /// Per-token logprob used to tile unknown force-decode targets.
    fallback_force_logprob: f64,
    unknown_calls: AtomicU64,
    total_calls: AtomicU64,
}

const DEFAULT_FALLBACK_LOGPROB: f64 = -2.0;

fn object_key(subject: &str, relation: &str) -> String {
    alloc::format!("{subject}\u{1f}{relation}")
}

fn force_key(subject: &str, relation: &str, target: &str) -> String {
    alloc::format!("{subject}\u{1f}{relation}\u{1f}{target}")
}

impl MockTableBackend {
    /// An empty table with the default fallback (`"none"`, logprob −2.0).
    pub fn new(id: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            generations: BTreeMap::new(),
            objects: BTreeMap::new(),
            forces: BTreeMap::new(),
            fallback: GenerationResult::from_text("none", alloc::vec![DEFAULT_FALLBACK_LOGPROB])
                .expect("default fallback is valid"),
            fallback_force_logprob: DEFAULT_FALLBACK_LOGPROB,
            unknown_calls: AtomicU64::new(0),
            total_calls: AtomicU64::new(0),
        }
    }

    /// Parses a JSONL fixture (see the type docs for the grammar).
    pub fn from_jsonl_str(id: impl Into<String>, src: &str) -> Result<Self, MockFixtureError> {
        let mut backend = Self::new(id);
        for (idx, raw) in src.lines().enumerate() {
            let line = idx + 1;
            let raw = raw.trim();
            if raw.is_empty() {
                continue;
            }
            let record: MockRecord =
                serde_json::from_str(raw).map_err(|e| MockFixtureError::Parse {
                    line,
                    message: e.to_string(),
                })?;
            backend.insert_record(record, line)?;
        }
        Ok(backend)
    }

    fn insert_record(&mut self, record: MockRecord, line: usize) -> Result<(), MockFixtureError> {
        let invalid = |reason: String| MockFixtureError::Invalid { line, reason };
        match record {
            MockRecord::Generate {
                prompt,
                text,
                tokens,
                logprobs,
            } => {
                let result = build_result(text, tokens, logprobs).map_err(|e| invalid(e.to_string()))?;
                if self.generations.insert(prompt, MockEntry::new(result)).is_some() {
                    return Err(MockFixtureError::Duplicate { line });
                }
            }
            MockRecord::Object {
                subject,
                relation,
                text,
                tokens,
                logprobs,
            } => {
                let result = build_result(text, tokens, logprobs).map_err(|e| invalid(e.to_string()))?;
                let key = object_key(&subject, &relation);
                if self.objects.insert(key, MockEntry::new(result)).is_some() {
                    return Err(MockFixtureError::Duplicate { line });
                }
            }
            MockRecord::Force {
                subject,
                relation,
                target,
                logprobs,
            } => {
                let tokens = whitespace_tokens(&target);
                if tokens.is_empty() {
                    return Err(invalid("force target has no tokens".to_string()));
                }
                if tokens.len() != logprobs.len() {
                    return Err(invalid(alloc::format!(
                        "target has {} tokens but {} logprobs given",
                        tokens.len(),
                        logprobs.len()
                    )));
                }
                let result = GenerationResult::new(target.clone(), tokens, logprobs)
                    .map_err(|e| invalid(e.to_string()))?;
                let key = force_key(&subject, &relation, &target);
                if self.forces.insert(key, MockEntry::new(result)).is_some() {
                    return Err(MockFixtureError::Duplicate { line });
                }
            }
            MockRecord::Fallback {
                text,
                tokens,
                logprobs,
                force_logprob,
            } => {
                self.fallback =
                    build_result(text, tokens, logprobs).map_err(|e| invalid(e.to_string()))?;
                self.fallback_force_logprob = force_logprob;
                if self.fallback_force_logprob.is_nan() || self.fallback_force_logprob > 0.0 {
                    return Err(invalid("force_logprob must be ≤ 0".to_string()));
                }
            }
        }
        Ok(())
    }

    /// Adds a generation entry (programmatic tests).
    pub fn insert_generation(&mut self, prompt: impl Into<String>, result: GenerationResult) {
        self.generations.insert(prompt.into(), MockEntry::new(result));
    }

    /// Adds a golden-object entry.
    pub fn insert_object(&mut self, subject: &str, relation: &str, result: GenerationResult) {
        self.objects
            .insert(object_key(subject, relation), MockEntry::new(result));
    }

    /// Adds a force-decode entry; tokens tile `target`.
    pub fn insert_force(
        &mut self,
        subject: &str,
        relation: &str,
        target: &str,
        logprobs: Vec<f64>,
    ) -> Result<(), BackendError> {
        let tokens = whitespace_tokens(target);
        let result = GenerationResult::new(target, tokens, logprobs)?;
        self.forces
            .insert(force_key(subject, relation, target), MockEntry::new(result));
        Ok(())
    }

    pub fn set_fallback(&mut self, result: GenerationResult, force_logprob: f64) {
        self.fallback = result;
        self.fallback_force_logprob = force_logprob;
    }

    /// Lookup with an explicit known/unknown flag (unknown ⇒ fallback served).
    pub fn generate_checked(&self, prompt: &str) -> (GenerationResult, bool) {
        self.total_calls.fetch_add(1, Ordering::Relaxed);
        match self.generations.get(prompt) {
            Some(entry) => (entry.hit(), true),
            None => (self.unknown(), false),
        }
    }

    pub fn object_checked(&self, subject: &str, relation: &RelationId) -> (GenerationResult, bool) {
        self.total_calls.fetch_add(1, Ordering::Relaxed);
        match self.objects.get(&object_key(subject, relation.as_str())) {
            Some(entry) => (entry.hit(), true),
            None => (self.unknown(), false),
        }
    }

    pub fn force_checked(
        &self,
        subject: &str,
        relation: &RelationId,
        target: &str,
    ) -> Result<(GenerationResult, bool), BackendError> {
        self.total_calls.fetch_add(1, Ordering::Relaxed);
        let tokens = whitespace_tokens(target);
        if tokens.is_empty() {
            return Err(BackendError::InvalidRequest {
                reason: "force-decode target is empty".to_string(),
            });
        }
        match self.forces.get(&force_key(subject, relation.as_str(), target)) {
            Some(entry) => Ok((entry.hit(), true)),
            None => {
                self.unknown_calls.fetch_add(1, Ordering::Relaxed);
                let logprobs = alloc::vec![self.fallback_force_logprob; tokens.len()];
                let result = GenerationResult::new(target, tokens, logprobs)?;
                Ok((result, false))
            }
        }
    }

    fn unknown(&self) -> GenerationResult {
        self.unknown_calls.fetch_add(1, Ordering::Relaxed);
        self.fallback.clone()
    }

    /// Calls answered from outside the table (fallback served).
    pub fn unknown_calls(&self) -> u64 {
        self.unknown_calls.load(Ordering::Relaxed)
    }

    /// Every call seen by this backend, known or not.
    pub fn total_calls(&self) -> u64 {
        self.total_calls.load(Ordering::Relaxed)
    }

    /// Calls that hit a specific generation entry.
    pub fn generate_calls(&self, prompt: &str) -> u64 {
        self.generations
            .get(prompt)
            .map(|e| e.calls.load(Ordering::Relaxed))
            .unwrap_or(0)
    }

    pub fn object_calls(&self, subject: &str, relation: &str) -> u64 {
        self.objects
            .get(&object_key(subject, relation))
            .map(|e| e.calls.load(Ordering::Relaxed))
            .unwrap_or(0)
    }

    pub fn force_calls(&self, subject: &str, relation: &str, target: &str) -> u64 {
        self.forces
            .get(&force_key(subject, relation, target))
            .map(|e| e.calls.load(Ordering::Relaxed))
            .unwrap_or(0)
    }
}

fn build_result(
    text: String,
    tokens: Option<Vec<String>>,
    logprobs: Vec<f64>,
) -> Result<GenerationResult, BackendError> {
    match tokens {
        Some(tokens) => GenerationResult::new(text, tokens, logprobs),
        None => GenerationResult::from_text(text, logprobs),
    }
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum MockRecord {
    Generate {
        prompt: String,
        text: String,
        #[serde(default)]
        tokens: Option<Vec<String>>,
        logprobs: Vec<f64>,
    },
    Object {
        subject: String,
        relation: String,
        text: String,
        #[serde(default)]
        tokens: Option<Vec<String>>,
        logprobs: Vec<f64>,
    },
    Force {
        subject: String,
        relation: String,
        target: String,
        logprobs: Vec<f64>,
    },
    Fallback {
        text: String,
        #[serde(default)]
        tokens: Option<Vec<String>>,
        logprobs: Vec<f64>,
        #[serde(default = "default_force_logprob")]
        force_logprob: f64,
    },
}

fn default_force_logprob() -> f64 {
    DEFAULT_FALLBACK_LOGPROB
}

impl ExtractorBackend for MockTableBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn generate(&self, prompt: &str) -> Result<GenerationResult, BackendError> {
        Ok(self.generate_checked(prompt).0)
    }
}

impl ReasonerBackend for MockTableBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn generate_object(
        &self,
        subject: &str,
        relation: &RelationId,
    ) -> Result<GenerationResult, BackendError> {
        Ok(self.object_checked(subject, relation).0)
    }

    fn force_decode(
        &self,
        subject: &str,
        relation: &RelationId,
        target: &str,
    ) -> Result<GenerationResult, BackendError> {
        self.force_checked(subject, relation, target).map(|(r, _)| r)
    }
}
