//! Registry of the 18 commonsense relations: 12 event-level and 6
//! entity-level, each with a natural-language extraction query, a
//! mid-sentence surface form, slot labels, and a store of curated in-context
//! examples.
//!
//! The registry is data, not code: it loads from a JSONL fixture (one record
//! per line) so every deployment shares one auditable file. A default fixture
//! ships embedded in the crate. Record grammar:
//!
//! ```text
//! {"record":"meta","version":"relations-v1"}
//! {"record":"relation","id":"MadeOf","level":"entity","query_template":"...Text:",
//!  "surface_realization":"is made of","slot_labels":["entity1","entity2"]}
//! {"record":"example","relation_id":"MadeOf","article_text":"...","subject":"...","object":"..."}
//! ```
//!
//! The optional `meta` record must come first; a `relation` must be declared
//! before its `example` records; iteration order is declaration order and is
//! part of the pipeline's output contract.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::text::space_join;

/// Default registry fixture embedded at compile time.
pub const DEFAULT_FIXTURE: &str = include_str!("../fixtures/relations.jsonl");

/// Entity-level relations keep at most this many in-context examples.
pub const MAX_ENTITY_EXAMPLES: usize = 20;

/// Identifier of a commonsense relation, e.g. `MadeOf` or `xNeed`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RelationId(String);

impl RelationId {
    pub fn new(id: impl Into<String>) -> Self {
        Self(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl core::fmt::Display for RelationId {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for RelationId {
    fn from(id: &str) -> Self {
        Self(id.to_string())
    }
}

/// Whether a relation connects events (ATOMIC-style) or entities
/// (ConceptNet-style).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RelationLevel {
    Event,
    Entity,
}

/// One relation: extraction query, surface form, and prompt slot labels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationSpec {
    pub id: RelationId,
    pub level: RelationLevel,
    /// Natural-language extraction query; ends with the literal `Text:` so
    /// the article can be appended directly after it.
    pub query_template: String,
    /// Phrase usable mid-sentence between a subject and an object, e.g.
    /// `is made of`.
    pub surface_realization: String,
    /// Labels used both when rendering prompts and when parsing generations:
    /// `["entity1","entity2"]` or `["event1","event2"]`.
    pub slot_labels: [String; 2],
}

/// A curated demonstration for one relation: a source sentence plus its
/// annotated subject and object.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InContextExample {
    pub relation_id: RelationId,
    pub article_text: String,
    pub subject: String,
    pub object: String,
}

/// Ordered, immutable set of relations with their example stores.
#[derive(Debug, Clone, PartialEq)]
pub struct RelationRegistry {
    version: String,
    relations: Vec<RelationSpec>,
    examples: Vec<Vec<InContextExample>>,
}

/// Errors while loading or serializing a registry fixture.
#[derive(Debug, thiserror::Error, PartialEq)]
pub enum RegistryError {
    #[error("line {line}: malformed registry record: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: meta record must be the first record")]
    MisplacedMeta { line: usize },
    #[error("line {line}: duplicate relation id `{id}`")]
    DuplicateRelation { line: usize, id: String },
    #[error("line {line}: example references undeclared relation `{id}`")]
    UnknownRelation { line: usize, id: String },
    #[error("line {line}: invalid relation `{id}`: {reason}")]
    InvalidRelation {
        line: usize,
        id: String,
        reason: String,
    },
    #[error("line {line}: invalid example for `{id}`: {reason}")]
    InvalidExample {
        line: usize,
        id: String,
        reason: String,
    },
    #[error("entity relation `{id}` has more than {limit} in-context examples")]
    TooManyExamples { id: String, limit: usize },
}

/// Errors when rendering an in-context example against a relation spec.
#[derive(Debug, Clone, thiserror::Error, PartialEq)]
pub enum RenderError {
    #[error("example for `{example}` rendered against relation `{spec}`")]
    RelationMismatch { spec: String, example: String },
    #[error("example for `{relation}` has an empty {slot}")]
    EmptySlot {
        relation: String,
        slot: &'static str,
    },
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum RegistryRecord {
    Meta {
        version: String,
    },
    Relation(RelationSpec),
    Example(InContextExample),
}

impl RelationRegistry {
    /// Parses a JSONL fixture. Every line must be a valid record; relations
    /// must precede their examples; ids must be unique.
    pub fn parse_jsonl(src: &str) -> Result<Self, RegistryError> {
        let mut registry = RelationRegistry {
            version: String::from("unversioned"),
            relations: Vec::new(),
            examples: Vec::new(),
        };
        let mut saw_record = false;
        for (idx, raw) in src.lines().enumerate() {
            let line = idx + 1;
            let raw = raw.trim();
            if raw.is_empty() {
                continue;
            }
            let record: RegistryRecord =
                serde_json::from_str(raw).map_err(|e| RegistryError::Parse {
                    line,
                    message: e.to_string(),
                })?;
            match record {
                RegistryRecord::Meta { version } => {
                    if saw_record {
                        return Err(RegistryError::MisplacedMeta { line });
                    }
                    registry.version = version;
                }
                RegistryRecord::Relation(spec) => {
                    validate_relation(&spec, line)?;
                    if registry.position(spec.id.as_str()).is_some() {
                        return Err(RegistryError::DuplicateRelation {
                            line,
                            id: spec.id.to_string(),
                        });
                    }
                    registry.relations.push(spec);
                    registry.examples.push(Vec::new());
                }
                RegistryRecord::Example(example) => {
                    let pos = registry
                        .position(example.relation_id.as_str())
                        .ok_or_else(|| RegistryError::UnknownRelation {
                            line,
                            id: example.relation_id.to_string(),
                        })?;
                    validate_example(&example, line)?;
                    registry.examples[pos].push(example);
                }
            }
            saw_record = true;
        }
        for (spec, examples) in registry.relations.iter().zip(&registry.examples) {
            if spec.level == RelationLevel::Entity && examples.len() > MAX_ENTITY_EXAMPLES {
                return Err(RegistryError::TooManyExamples {
                    id: spec.id.to_string(),
                    limit: MAX_ENTITY_EXAMPLES,
                });
            }
        }
        Ok(registry)
    }

    /// Serializes back to the JSONL fixture grammar (meta line first, then
    /// relations in order, then examples grouped per relation).
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        let meta = RegistryRecord::Meta {
            version: self.version.clone(),
        };
        out.push_str(&serde_json::to_string(&meta).expect("meta record serializes"));
        out.push('\n');
        for spec in &self.relations {
            let record = RegistryRecord::Relation(spec.clone());
            out.push_str(&serde_json::to_string(&record).expect("relation record serializes"));
            out.push('\n');
        }
        for examples in &self.examples {
            for example in examples {
                let record = RegistryRecord::Example(example.clone());
                out.push_str(&serde_json::to_string(&record).expect("example record serializes"));
                out.push('\n');
            }
        }
        out
    }

    /// Fixture version string from the meta record.
    pub fn version(&self) -> &str {
        &self.version
    }

    pub fn len(&self) -> usize {
        self.relations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.relations.is_empty()
    }

    /// Relations in declaration order.
    pub fn iter(&self) -> impl Iterator<Item = &RelationSpec> {
        self.relations.iter()
    }

    pub fn get(&self, id: &str) -> Option<&RelationSpec> {
        self.position(id).map(|pos| &self.relations[pos])
    }

    /// Declaration-order index of a relation; the tie-break key for
    /// representative selection.
    pub fn position(&self, id: &str) -> Option<usize> {
        self.relations.iter().position(|spec| spec.id.as_str() == id)
    }

    /// In-context examples for a relation, in store order. Unknown relations
    /// have no examples.
    pub fn examples(&self, id: &str) -> &[InContextExample] {
        self.position(id)
            .map(|pos| self.examples[pos].as_slice())
            .unwrap_or(&[])
    }
}

fn validate_relation(spec: &RelationSpec, line: usize) -> Result<(), RegistryError> {
    let fail = |reason: &str| RegistryError::InvalidRelation {
        line,
        id: spec.id.to_string(),
        reason: reason.to_string(),
    };
    if spec.id.as_str().is_empty() {
        return Err(fail("empty id"));
    }
    if spec.query_template.trim().is_empty() {
        return Err(fail("empty query template"));
    }
    if !spec.query_template.ends_with("Text:") {
        return Err(fail("query template must end with `Text:`"));
    }
    if spec.surface_realization.trim().is_empty() {
        return Err(fail("empty surface realization"));
    }
    if spec.slot_labels.iter().any(|label| label.trim().is_empty()) {
        return Err(fail("empty slot label"));
    }
    Ok(())
}

fn validate_example(example: &InContextExample, line: usize) -> Result<(), RegistryError> {
    let fail = |reason: &str| RegistryError::InvalidExample {
        line,
        id: example.relation_id.to_string(),
        reason: reason.to_string(),
    };
    if example.article_text.trim().is_empty() {
        return Err(fail("empty article text"));
    }
    if example.subject.trim().is_empty() {
        return Err(fail("empty subject"));
    }
    if example.object.trim().is_empty() {
        return Err(fail("empty object"));
    }
    Ok(())
}

/// The registry shipped with the crate: all 18 relations with verbatim
/// extraction queries and curated in-context examples.
pub fn default_registry() -> RelationRegistry {
    RelationRegistry::parse_jsonl(DEFAULT_FIXTURE).expect("embedded relation fixture is valid")
}

/// The mid-sentence surface form Γ(r) of a relation.
pub fn surface(spec: &RelationSpec) -> &str {
    &spec.surface_realization
}

/// Renders one in-context demonstration: query, source sentence, then the
/// annotation sentence `<slot1> is <subject> and <slot2> is <object>.`
pub fn render_icl_example(
    spec: &RelationSpec,
    example: &InContextExample,
) -> Result<String, RenderError> {
    if example.relation_id != spec.id {
        return Err(RenderError::RelationMismatch {
            spec: spec.id.to_string(),
            example: example.relation_id.to_string(),
        });
    }
    let subject = example.subject.trim();
    let object = example.object.trim();
    if subject.is_empty() {
        return Err(RenderError::EmptySlot {
            relation: spec.id.to_string(),
            slot: "subject",
        });
    }
    if object.is_empty() {
        return Err(RenderError::EmptySlot {
            relation: spec.id.to_string(),
            slot: "object",
        });
    }
    let annotation = format!(
        "{} is {} and {} is {}.",
        spec.slot_labels[0], subject, spec.slot_labels[1], object
    );
    Ok(space_join([
        spec.query_template.as_str(),
        example.article_text.as_str(),
        annotation.as_str(),
    ]))
}
