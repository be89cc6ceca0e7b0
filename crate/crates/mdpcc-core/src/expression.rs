//! Stage 3 — representative selection, the commonsense-expression grammar,
//! and article augmentation.
//!
//! The candidate with the highest conflict score becomes the representative.
//! Its expression is one templated sentence:
//!
//! - conflict (`c ≥ μ`): `However, <s> <Γ(r)> <ô> instead of <o>.`
//! - agreement (`c < μ`): `And, <s> <Γ(r)> <ô>.`
//!
//! Two grammar ablations exist: `no_conj` drops the leading conjunction word
//! and comma, `no_obj` drops the `instead of <o>` tail. The `no_icl` ablation
//! changes only the upstream prompt assembly (K = 0) and leaves this grammar
//! untouched. The augmented article is the original text followed by the
//! expression, single-space separated; articles without candidates pass
//! through unchanged.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::corpus::LabeledArticle;
use crate::reasoning::ScoredTriplet;
use crate::relations::{surface, RelationRegistry};
use crate::text::space_join;

/// Version tag of the expression grammar; participates in the pipeline
/// config hash so grammar changes invalidate cached records.
pub const TEMPLATE_VERSION: &str = "expr-v1";

/// Conjunction slot of the expression.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Conjunction {
    However,
    And,
    None,
}

impl Conjunction {
    /// The rendered conjunction word, if any.
    pub fn word(self) -> Option<&'static str> {
        match self {
            Conjunction::However => Some("However"),
            Conjunction::And => Some("And"),
            Conjunction::None => None,
        }
    }
}

/// Pipeline ablation modes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    /// The complete method.
    Full,
    /// No in-context examples (K = 0); grammar unchanged.
    NoIcl,
    /// Expression without the conjunction word.
    NoConj,
    /// Expression without the `instead of <o>` tail.
    NoObj,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [
        Ablation::Full,
        Ablation::NoIcl,
        Ablation::NoConj,
        Ablation::NoObj,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoIcl => "no_icl",
            Ablation::NoConj => "no_conj",
            Ablation::NoObj => "no_obj",
        }
    }
}

impl core::fmt::Display for Ablation {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl core::str::FromStr for Ablation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "full" => Ok(Ablation::Full),
            "no_icl" => Ok(Ablation::NoIcl),
            "no_conj" => Ok(Ablation::NoConj),
            "no_obj" => Ok(Ablation::NoObj),
            other => Err(format!(
                "unknown ablation `{other}` (expected full, no_icl, no_conj, or no_obj)"
            )),
        }
    }
}

/// The rendered commonsense expression plus everything needed to audit it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommonsenseExpression {
    /// The sentence appended to the article; empty when no candidate exists.
    pub text: String,
    pub conjunction: Conjunction,
    /// The representative triplet, if any candidate survived.
    pub selected: Option<ScoredTriplet>,
    /// Whether the representative's conflict score reached μ.
    pub conflicted: bool,
    pub ablation: Ablation,
}

impl CommonsenseExpression {
    /// The empty expression: articles without candidates pass through.
    pub fn empty(ablation: Ablation) -> Self {
        Self {
            text: String::new(),
            conjunction: Conjunction::None,
            selected: None,
            conflicted: false,
            ablation,
        }
    }
}

/// An article with its expression appended.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentedArticle {
    pub article_id: String,
    pub original_text: String,
    pub expression: CommonsenseExpression,
    pub augmented_text: String,
    pub label: crate::corpus::Veracity,
}

/// Picks the candidate with the highest conflict score. Ties break to the
/// earliest relation in registry order, then to the lexicographically
/// smallest subject.
pub fn select_representative<'a>(
    candidates: &'a [ScoredTriplet],
    registry: &RelationRegistry,
) -> Option<&'a ScoredTriplet> {
    let rank = |candidate: &ScoredTriplet| {
        registry
            .position(candidate.triplet.relation_id.as_str())
            .unwrap_or(usize::MAX)
    };
    candidates.iter().reduce(|best, challenger| {
        let beats = challenger.conflict_score > best.conflict_score
            || (challenger.conflict_score == best.conflict_score
                && (rank(challenger) < rank(best)
                    || (rank(challenger) == rank(best)
                        && challenger.triplet.subject < best.triplet.subject)));
        if beats {
            challenger
        } else {
            best
        }
    })
}

/// Renders the expression for a selected candidate (or the empty expression
/// for `None`). The surface form Γ(r) comes from the registry; a relation
/// missing from the registry falls back to its id verbatim, which only
/// happens when candidates and registry are mismatched.
pub fn build_expression(
    selected: Option<&ScoredTriplet>,
    registry: &RelationRegistry,
    mu: f64,
    ablation: Ablation,
) -> CommonsenseExpression {
    let Some(candidate) = selected else {
        return CommonsenseExpression::empty(ablation);
    };
    let relation_id = candidate.triplet.relation_id.as_str();
    let realization = registry
        .get(relation_id)
        .map(surface)
        .unwrap_or(relation_id);
    let conflicted = candidate.conflict_score >= mu;

    let mut slots: Vec<&str> = alloc::vec![
        candidate.triplet.subject.as_str(),
        realization,
        candidate.golden_object.as_str(),
    ];
    if conflicted && ablation != Ablation::NoObj {
        slots.push("instead of");
        slots.push(candidate.triplet.object.as_str());
    }
    let body = space_join(slots);

    let conjunction = if ablation == Ablation::NoConj {
        Conjunction::None
    } else if conflicted {
        Conjunction::However
    } else {
        Conjunction::And
    };
    let text = match conjunction.word() {
        Some(word) => format!("{word}, {body}."),
        None => format!("{body}."),
    };

    CommonsenseExpression {
        text,
        conjunction,
        selected: Some(candidate.clone()),
        conflicted,
        ablation,
    }
}

/// Appends the expression to the article: `x̂ = x ⊕ e`. All expression
/// metadata rides along for the audit trail.
pub fn augment(article: &LabeledArticle, expression: CommonsenseExpression) -> AugmentedArticle {
    let augmented_text = space_join([article.text.as_str(), expression.text.as_str()]);
    AugmentedArticle {
        article_id: article.id.clone(),
        original_text: article.text.clone(),
        expression,
        augmented_text,
        label: article.label,
    }
}
