//! Stage 2 — golden objects and conflict scores.
//!
//! For each extracted triplet `(s, r, o)` the commonsense reasoner generates
//! the *golden* object `ô` it believes in (greedy decode), and the extracted
//! object `o` is teacher-forced through the same reasoner to measure how
//! plausible the reasoner finds it. The conflict score is
//! `c = 1 − exp(mean token logprob of o)` — one minus the geometric-mean
//! token probability — so `c ∈ [0, 1)` and higher means stronger conflict.
//!
//! Scoring depends only on `o`'s forced logprobs, never on `ô`'s length, so
//! the score is always well-defined even when `|o| ≠ |ô|`.

use alloc::string::{String, ToString};
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::backends::{BackendError, GenerationResult, ReasonerBackend};
use crate::extraction::CommonsenseTriplet;
use crate::relations::RelationId;

/// A candidate for expression building: the triplet, its golden object, and
/// the conflict score of the extracted object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredTriplet {
    pub triplet: CommonsenseTriplet,
    pub golden_object: String,
    pub golden_generation: GenerationResult,
    /// `1 − exp(mean forced logprob)`, in `[0, 1)`.
    pub conflict_score: f64,
}

/// Scoring-stage knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoringConfig {
    /// Conflict threshold μ separating the "However" and "And" branches.
    pub mu: f64,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        Self { mu: 0.6 }
    }
}

impl ScoringConfig {
    pub fn validate(&self) -> Result<(), ReasoningError> {
        if !(self.mu > 0.0 && self.mu < 1.0) {
            return Err(ReasoningError::Config {
                reason: alloc::format!("mu must be in (0, 1), got {}", self.mu),
            });
        }
        Ok(())
    }
}

/// Reasoning failures carry the triplet being scored.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ReasoningError {
    #[error("invalid scoring config: {reason}")]
    Config { reason: String },
    #[error("triplet ({subject}, {relation}): {source}")]
    Backend {
        subject: String,
        relation: String,
        source: BackendError,
    },
    /// The reasoner produced an empty golden object; the triplet cannot form
    /// an expression and is excluded from the candidate list.
    #[error("triplet ({subject}, {relation}): reasoner generated an empty golden object")]
    DegenerateGolden { subject: String, relation: String },
    #[error("triplet ({subject}, {relation}): force decode returned no tokens")]
    EmptyForce { subject: String, relation: String },
}

/// Per-triplet audit entry for the scoring stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoringAudit {
    pub subject: String,
    pub relation_id: RelationId,
    pub object: String,
    /// `None` when the golden generation was degenerate (empty).
    pub golden_object: Option<String>,
    pub forced_logprobs: Vec<f64>,
    pub conflict_score: Option<f64>,
    pub degenerate_golden: bool,
}

/// Asks the reasoner for the golden object of `(s, r)`. The text is
/// whitespace-trimmed but never otherwise edited; an empty generation is a
/// degenerate-golden error.
pub fn golden_object<B: ReasonerBackend + ?Sized>(
    triplet: &CommonsenseTriplet,
    reasoner: &B,
) -> Result<(String, GenerationResult), ReasoningError> {
    let generation = reasoner
        .generate_object(&triplet.subject, &triplet.relation_id)
        .map_err(|source| backend_error(triplet, source))?;
    let golden = generation.text.trim().to_string();
    if golden.is_empty() {
        return Err(ReasoningError::DegenerateGolden {
            subject: triplet.subject.clone(),
            relation: triplet.relation_id.to_string(),
        });
    }
    Ok((golden, generation))
}

/// Conflict score of the extracted object under the reasoner:
/// `c = 1 − exp(mean logprob of o's tokens)`. Returns the forced generation
/// alongside the score for the audit stream.
pub fn conflict_score<B: ReasonerBackend + ?Sized>(
    triplet: &CommonsenseTriplet,
    reasoner: &B,
) -> Result<(f64, GenerationResult), ReasoningError> {
    let forced = reasoner
        .force_decode(&triplet.subject, &triplet.relation_id, &triplet.object)
        .map_err(|source| backend_error(triplet, source))?;
    let mean = forced.mean_logprob().ok_or_else(|| ReasoningError::EmptyForce {
        subject: triplet.subject.clone(),
        relation: triplet.relation_id.to_string(),
    })?;
    Ok((1.0 - libm::exp(mean), forced))
}

/// Scores every triplet in order. Degenerate goldens are excluded from the
/// candidate list but logged in the audit stream; backend failures abort.
pub fn score_all<B: ReasonerBackend + ?Sized>(
    triplets: &[CommonsenseTriplet],
    reasoner: &B,
) -> Result<(Vec<ScoredTriplet>, Vec<ScoringAudit>), ReasoningError> {
    let mut scored = Vec::with_capacity(triplets.len());
    let mut audits = Vec::with_capacity(triplets.len());
    for triplet in triplets {
        let golden = match golden_object(triplet, reasoner) {
            Ok(pair) => Some(pair),
            Err(ReasoningError::DegenerateGolden { .. }) => None,
            Err(other) => return Err(other),
        };
        let Some((golden_text, golden_generation)) = golden else {
            audits.push(ScoringAudit {
                subject: triplet.subject.clone(),
                relation_id: triplet.relation_id.clone(),
                object: triplet.object.clone(),
                golden_object: None,
                forced_logprobs: Vec::new(),
                conflict_score: None,
                degenerate_golden: true,
            });
            continue;
        };
        let (score, forced) = conflict_score(triplet, reasoner)?;
        audits.push(ScoringAudit {
            subject: triplet.subject.clone(),
            relation_id: triplet.relation_id.clone(),
            object: triplet.object.clone(),
            golden_object: Some(golden_text.clone()),
            forced_logprobs: forced.token_logprobs.clone(),
            conflict_score: Some(score),
            degenerate_golden: false,
        });
        scored.push(ScoredTriplet {
            triplet: triplet.clone(),
            golden_object: golden_text,
            golden_generation,
            conflict_score: score,
        });
    }
    Ok((scored, audits))
}

fn backend_error(triplet: &CommonsenseTriplet, source: BackendError) -> ReasoningError {
    ReasoningError::Backend {
        subject: triplet.subject.clone(),
        relation: triplet.relation_id.to_string(),
        source,
    }
}
