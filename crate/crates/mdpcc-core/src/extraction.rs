//! Stage 1 — commonsense triplet extraction.
//!
//! For every relation in the registry (in registry order) this stage
//! assembles an in-context-learning prompt, asks the extractor backend for a
//! generation, parses the `<slot1> is S and <slot2> is O` answer pattern, and
//! drops generations whose per-token negative log-likelihood exceeds the
//! filter threshold ε. Surviving triplets form the candidate relation set of
//! the article.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::backends::{BackendError, ExtractorBackend, GenerationResult};
use crate::relations::{InContextExample, RelationId, RelationRegistry, RelationSpec, RenderError};
use crate::text::{find_ascii_ci, space_join, starts_with_ascii_ci};

use crate::relations::render_icl_example;

/// One extracted commonsense triplet `(subject, relation, object)` with the
/// generation it was parsed from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommonsenseTriplet {
    pub subject: String,
    pub relation_id: RelationId,
    pub object: String,
    pub source_generation: GenerationResult,
}

/// Extraction-stage knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractionConfig {
    /// Number of in-context examples per prompt.
    pub k: usize,
    /// Filter threshold ε: generations scoring above it are removed.
    pub epsilon: f64,
    /// Decoding cap forwarded to backends that decode.
    pub max_new_tokens: u32,
}

impl Default for ExtractionConfig {
    fn default() -> Self {
        Self {
            k: 5,
            epsilon: 0.8,
            max_new_tokens: 32,
        }
    }
}

impl ExtractionConfig {
    pub fn validate(&self) -> Result<(), ExtractError> {
        if self.epsilon.is_nan() || self.epsilon <= 0.0 {
            return Err(ExtractError::Config {
                reason: format!("epsilon must be > 0, got {}", self.epsilon),
            });
        }
        Ok(())
    }
}

/// Extraction failures. Backend errors carry the relation being processed.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ExtractError {
    #[error("invalid extraction config: {reason}")]
    Config { reason: String },
    #[error("relation {relation}: {have} in-context examples stored, {need} requested")]
    NotEnoughExamples {
        relation: String,
        have: usize,
        need: usize,
    },
    #[error("relation {relation}: {source}")]
    Render {
        relation: String,
        source: RenderError,
    },
    #[error("relation {relation}: {source}")]
    Backend {
        relation: String,
        source: BackendError,
    },
    #[error("relation {relation}: generation has no tokens, cannot filter")]
    EmptyGeneration { relation: String },
}

/// Per-(article, relation) audit trail entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractionAudit {
    pub relation_id: RelationId,
    pub prompt: String,
    pub generation: GenerationResult,
    pub parsed: bool,
    pub subject: Option<String>,
    pub object: Option<String>,
    /// Present only for parsed generations.
    pub filter_score: Option<f64>,
    pub kept: bool,
}

/// Everything stage 1 produces for one article: surviving triplets (registry
/// order) plus one audit entry per relation attempted.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ExtractionOutcome {
    pub triplets: Vec<CommonsenseTriplet>,
    pub audits: Vec<ExtractionAudit>,
}

/// Assembles `I_1 ⊕ … ⊕ I_K ⊕ T ⊕ article` from the first `k` stored
/// examples. `k = 0` yields `T ⊕ article` (the no-ICL ablation).
pub fn build_prompt(
    spec: &RelationSpec,
    examples: &[InContextExample],
    article: &str,
    k: usize,
) -> Result<String, ExtractError> {
    if examples.len() < k {
        return Err(ExtractError::NotEnoughExamples {
            relation: spec.id.to_string(),
            have: examples.len(),
            need: k,
        });
    }
    let mut parts: Vec<String> = Vec::with_capacity(k + 2);
    for example in &examples[..k] {
        let rendered = render_icl_example(spec, example).map_err(|source| ExtractError::Render {
            relation: spec.id.to_string(),
            source,
        })?;
        parts.push(rendered);
    }
    parts.push(spec.query_template.clone());
    parts.push(article.to_string());
    Ok(space_join(parts.iter().map(String::as_str)))
}

/// Parses the canonical answer pattern `<slot1> is S and <slot2> is O`,
/// ASCII-case-insensitively, tolerating one trailing period. Near misses are
/// dropped rather than repaired so the stage stays auditable.
pub fn parse_extraction(
    spec: &RelationSpec,
    gen: &GenerationResult,
) -> Option<CommonsenseTriplet> {
    let text = gen.text.trim();
    let lead = format!("{} is ", spec.slot_labels[0]);
    if !starts_with_ascii_ci(text, &lead) {
        return None;
    }
    let rest = &text[lead.len()..];
    let separator = format!(" and {} is ", spec.slot_labels[1]);
    let at = find_ascii_ci(rest, &separator)?;
    let subject = rest[..at].trim();
    let object = rest[at + separator.len()..].trim();
    let object = object.strip_suffix('.').unwrap_or(object).trim();
    if subject.is_empty() || object.is_empty() {
        return None;
    }
    Some(CommonsenseTriplet {
        subject: subject.to_string(),
        relation_id: spec.id.clone(),
        object: object.to_string(),
        source_generation: gen.clone(),
    })
}

/// Per-token negative mean log-likelihood of a generation. Generations
/// scoring above ε are considered meaningless and removed.
pub fn filter_score(gen: &GenerationResult) -> Result<f64, &'static str> {
    match gen.mean_logprob() {
        Some(mean) => Ok(-mean),
        None => Err("generation has no tokens"),
    }
}

/// Runs extraction over every relation in registry order. Empty articles
/// yield an empty outcome without touching the backend.
pub fn extract_triplets<B: ExtractorBackend + ?Sized>(
    article: &str,
    registry: &RelationRegistry,
    backend: &B,
    cfg: &ExtractionConfig,
) -> Result<ExtractionOutcome, ExtractError> {
    cfg.validate()?;
    let mut outcome = ExtractionOutcome::default();
    if article.trim().is_empty() {
        return Ok(outcome);
    }
    for spec in registry.iter() {
        let examples = registry.examples(spec.id.as_str());
        let prompt = build_prompt(spec, examples, article, cfg.k)?;
        let generation = backend
            .generate(&prompt)
            .map_err(|source| ExtractError::Backend {
                relation: spec.id.to_string(),
                source,
            })?;
        let parsed = parse_extraction(spec, &generation);
        let mut audit = ExtractionAudit {
            relation_id: spec.id.clone(),
            prompt,
            generation: generation.clone(),
            parsed: parsed.is_some(),
            subject: parsed.as_ref().map(|t| t.subject.clone()),
            object: parsed.as_ref().map(|t| t.object.clone()),
            filter_score: None,
            kept: false,
        };
        if let Some(triplet) = parsed {
            let score =
                filter_score(&generation).map_err(|_| ExtractError::EmptyGeneration {
                    relation: spec.id.to_string(),
                })?;
            audit.filter_score = Some(score);
            if score <= cfg.epsilon {
                audit.kept = true;
                outcome.triplets.push(triplet);
            }
        }
        outcome.audits.push(audit);
    }
    Ok(outcome)
}
