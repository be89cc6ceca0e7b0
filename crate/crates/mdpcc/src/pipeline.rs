//! The augmentation pipeline over whole corpora: extract → filter → score →
//! select → template → append, per article, in parallel, with two cache
//! planes underneath (raw generations keyed by request, finished records
//! keyed by config digest + article). Output order always equals input
//! order regardless of worker count.

use std::sync::Arc;

use mdpcc_core::backends::{ExtractorBackend, ReasonerBackend};
use mdpcc_core::corpus::{DatasetSplit, LabeledArticle, SplitName};
use mdpcc_core::expression::{augment, build_expression, select_representative, Ablation};
use mdpcc_core::extraction::{extract_triplets, ExtractError, ExtractionConfig};
use mdpcc_core::reasoning::{score_all, ReasoningError};
use mdpcc_core::relations::{RelationId, RelationRegistry};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cache::{sha256_hex, CachePlane, DiskCache};
use crate::data::{AugmentationRecord, Provenance};

/// One line of the per-article audit trail. Prompts are recorded by digest
/// only; full texts live in the generation cache when one is enabled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "stage", rename_all = "snake_case")]
pub enum AuditLine {
    Extraction {
        article_id: String,
        relation_id: RelationId,
        prompt_sha256: String,
        parsed: bool,
        kept: bool,
        filter_score: Option<f64>,
        subject: Option<String>,
        object: Option<String>,
    },
    Scoring {
        article_id: String,
        subject: String,
        relation_id: RelationId,
        object: String,
        golden_object: Option<String>,
        conflict_score: Option<f64>,
        degenerate_golden: bool,
        forced_logprobs: Vec<f64>,
    },
}

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("article {article_id}: {source}")]
    Extract {
        article_id: String,
        source: ExtractError,
    },
    #[error("article {article_id}: {source}")]
    Scoring {
        article_id: String,
        source: ReasoningError,
    },
}

impl PipelineError {
    /// Whether the failure came from a backend (as opposed to bad
    /// settings); backend failures map to the environment exit code.
    pub fn is_backend(&self) -> bool {
        match self {
            PipelineError::Extract { source, .. } => {
                matches!(source, ExtractError::Backend { .. })
            }
            PipelineError::Scoring { source, .. } => {
                matches!(source, ReasoningError::Backend { .. })
            }
        }
    }
}

/// Runs the full pipeline for one article: extraction with the perplexity
/// filter, conflict scoring, representative selection, and templating.
pub fn augment_article<E, R>(
    article: &LabeledArticle,
    registry: &RelationRegistry,
    extraction: &ExtractionConfig,
    mu: f64,
    ablation: Ablation,
    extractor: &E,
    reasoner: &R,
) -> Result<(mdpcc_core::expression::AugmentedArticle, Vec<AuditLine>), PipelineError>
where
    E: ExtractorBackend + ?Sized,
    R: ReasonerBackend + ?Sized,
{
    let outcome = extract_triplets(&article.text, registry, extractor, extraction).map_err(
        |source| PipelineError::Extract {
            article_id: article.id.clone(),
            source,
        },
    )?;
    let mut audits: Vec<AuditLine> = outcome
        .audits
        .iter()
        .map(|a| AuditLine::Extraction {
            article_id: article.id.clone(),
            relation_id: a.relation_id.clone(),
            prompt_sha256: sha256_hex(&[a.prompt.as_bytes()]),
            parsed: a.parsed,
            kept: a.kept,
            filter_score: a.filter_score,
            subject: a.subject.clone(),
            object: a.object.clone(),
        })
        .collect();

    let (scored, scoring_audits) =
        score_all(&outcome.triplets, reasoner).map_err(|source| PipelineError::Scoring {
            article_id: article.id.clone(),
            source,
        })?;
    audits.extend(scoring_audits.iter().map(|a| AuditLine::Scoring {
        article_id: article.id.clone(),
        subject: a.subject.clone(),
        relation_id: a.relation_id.clone(),
        object: a.object.clone(),
        golden_object: a.golden_object.clone(),
        conflict_score: a.conflict_score,
        degenerate_golden: a.degenerate_golden,
        forced_logprobs: a.forced_logprobs.clone(),
    }));

    let selected = select_representative(&scored, registry);
    let expression = build_expression(selected, registry, mu, ablation);
    Ok((augment(article, expression), audits))
}

/// Cache key for a finished record: the config digest plus the exact
/// article identity. Any setting change (via the digest) or text change
/// forces a recompute.
pub fn record_key(config_hash: &str, article: &LabeledArticle) -> String {
    sha256_hex(&[
        config_hash.as_bytes(),
        article.id.as_bytes(),
        article.text.as_bytes(),
        &[article.label.as_u8()],
    ])
}

/// Immutable inputs shared by every article of a split run.
pub struct SplitJob<'a> {
    pub registry: &'a RelationRegistry,
    pub extraction: &'a ExtractionConfig,
    pub mu: f64,
    pub ablation: Ablation,
    pub provenance: &'a Provenance,
    /// Record-plane cache; `None` disables record reuse.
    pub cache: Option<&'a Arc<DiskCache>>,
}

/// What the record plane stores per article: the finished record together
/// with its audit trail, so a cache-served rerun reproduces the audit file
/// byte for byte alongside the augmented one.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct CachedArticle {
    record: AugmentationRecord,
    audits: Vec<AuditLine>,
}

/// Result of augmenting one split.
pub struct SplitOutcome {
    pub records: Vec<AugmentationRecord>,
    /// Audit lines for every article, freshly computed or replayed from
    /// the record cache.
    pub audits: Vec<AuditLine>,
    pub record_hits: u64,
}

/// Augments every article of a split on the given thread pool. Articles
/// are processed in parallel but collected back in input order, so the
/// output is independent of the worker count.
pub fn augment_split<E, R>(
    split: &DatasetSplit,
    job: &SplitJob<'_>,
    extractor: &E,
    reasoner: &R,
    pool: &rayon::ThreadPool,
) -> Result<SplitOutcome, PipelineError>
where
    E: ExtractorBackend + Sync + ?Sized,
    R: ReasonerBackend + Sync + ?Sized,
{
    type ArticleResult = Result<(AugmentationRecord, Vec<AuditLine>, bool), PipelineError>;

    let per_article = |article: &LabeledArticle| -> ArticleResult {
        let key = record_key(&job.provenance.config_hash, article);
        if let Some(cache) = job.cache {
            if let Some(entry) = cache.get_json::<CachedArticle>(CachePlane::Record, &key) {
                if entry.record.config_hash == job.provenance.config_hash {
                    return Ok((entry.record, entry.audits, true));
                }
                // A record filed under this key must carry this config
                // hash; anything else is a corrupt or colliding entry.
                cache.evict(CachePlane::Record, &key);
            }
        }
        let (augmented, audits) = augment_article(
            article,
            job.registry,
            job.extraction,
            job.mu,
            job.ablation,
            extractor,
            reasoner,
        )?;
        let entry = CachedArticle {
            record: AugmentationRecord::new(augmented, job.provenance),
            audits,
        };
        if let Some(cache) = job.cache {
            let _ = cache.put_json(CachePlane::Record, &key, &entry);
        }
        Ok((entry.record, entry.audits, false))
    };

    let per_article_results: Vec<_> = pool.install(|| {
        split
            .articles
            .par_iter()
            .map(per_article)
            .collect::<Result<Vec<_>, _>>()
    })?;

    let mut outcome = SplitOutcome {
        records: Vec::with_capacity(per_article_results.len()),
        audits: Vec::new(),
        record_hits: 0,
    };
    for (record, audits, hit) in per_article_results {
        outcome.records.push(record);
        outcome.audits.extend(audits);
        outcome.record_hits += u64::from(hit);
    }
    Ok(outcome)
}

/// Per-split slice of the run summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSummary {
    pub split: SplitName,
    pub articles: usize,
    /// Articles whose expression took the contrastive ("However") branch.
    pub conflicted: usize,
    /// Articles with no usable triplet and therefore an empty expression.
    pub empty_expressions: usize,
    /// Mean conflict score over articles with a selected triplet.
    pub mean_conflict: Option<f64>,
    /// Parsed triplets rejected by the likelihood filter, counted from the
    /// run's audit trail (replayed cache entries included).
    #[serde(default)]
    pub filter_drops: usize,
}

impl SplitSummary {
    pub fn from_records(split: SplitName, records: &[AugmentationRecord]) -> Self {
        let mut conflicted = 0usize;
        let mut empty = 0usize;
        let mut conflict_sum = 0.0f64;
        let mut conflict_count = 0usize;
        for record in records {
            if record.expression.conflicted {
                conflicted += 1;
            }
            match &record.expression.selected {
                Some(selected) => {
                    conflict_sum += selected.conflict_score;
                    conflict_count += 1;
                }
                None => empty += 1,
            }
        }
        SplitSummary {
            split,
            articles: records.len(),
            conflicted,
            empty_expressions: empty,
            mean_conflict: (conflict_count > 0).then(|| conflict_sum / conflict_count as f64),
            filter_drops: 0,
        }
    }

    /// Counts the filter rejections recorded in this run's audit lines.
    pub fn count_filter_drops(audits: &[AuditLine]) -> usize {
        audits
            .iter()
            .filter(|line| {
                matches!(
                    line,
                    AuditLine::Extraction {
                        parsed: true,
                        kept: false,
                        ..
                    }
                )
            })
            .count()
    }
}

/// Machine-readable result of an augment run, written next to the
/// augmented corpora. The call counters make cache behavior observable:
/// a fully warm rerun reports zero extractor and reasoner calls.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub config_hash: String,
    pub extractor_id: String,
    pub reasoner_id: String,
    pub splits: Vec<SplitSummary>,
    /// Requests that reached the actual extractor backend.
    pub extractor_calls: u64,
    /// Requests that reached the actual reasoner backend.
    pub reasoner_calls: u64,
    pub generation_cache_hits: u64,
    pub record_cache_hits: u64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use mdpcc_core::backends::{GenerationResult, MockTableBackend};
    use mdpcc_core::corpus::Veracity;
    use mdpcc_core::extraction::build_prompt;

    /// Two-relation registry small enough to reason about by hand.
    fn tiny_registry() -> RelationRegistry {
        let src = r#"
{"record":"meta","version":"test-v1"}
{"record":"relation","id":"MadeOf","level":"entity","query_template":"Extract one commonsense triplet (entity1, MadeOf, entity2) from the text. Answer with entity1 is ... and entity2 is ... Text:","surface_realization":"is made of","slot_labels":["entity1","entity2"]}
{"record":"relation","id":"UsedFor","level":"entity","query_template":"Extract one commonsense triplet (entity1, UsedFor, entity2) from the text. Answer with entity1 is ... and entity2 is ... Text:","surface_realization":"is used for","slot_labels":["entity1","entity2"]}
{"record":"example","relation_id":"MadeOf","article_text":"Glass bottles are made of sand.","subject":"glass bottles","object":"sand"}
{"record":"example","relation_id":"UsedFor","article_text":"A kettle is used for boiling water.","subject":"a kettle","object":"boiling water"}
"#;
        RelationRegistry::parse_jsonl(src).unwrap()
    }

    fn extraction_config() -> ExtractionConfig {
        ExtractionConfig {
            k: 1,
            epsilon: 0.8,
            max_new_tokens: 32,
        }
    }

    fn article() -> LabeledArticle {
        LabeledArticle {
            id: "a1".to_string(),
            text: "Meat floss is made of cotton, a viral clip claims.".to_string(),
            label: Veracity::Fake,
        }
    }

    /// Mock covering the whole happy path for [`article`] under
    /// [`tiny_registry`]: MadeOf parses and conflicts, UsedFor falls back
    /// to an unparseable generation.
    fn pipeline_mock(registry: &RelationRegistry) -> MockTableBackend {
        let mut mock = MockTableBackend::new("mock:pipeline");
        let spec = registry.get("MadeOf").unwrap();
        let prompt = build_prompt(
            spec,
            registry.examples("MadeOf"),
            &article().text,
            extraction_config().k,
        )
        .unwrap();
        let text = "entity1 is meat floss and entity2 is cotton.";
        let tokens = text.split_whitespace().count();
        mock.insert_generation(
            &prompt,
            GenerationResult::from_text(text, vec![-0.1; tokens]).unwrap(),
        );
        mock.insert_object(
            "meat floss",
            "MadeOf",
            GenerationResult::from_text("meatloaf", vec![-0.2]).unwrap(),
        );
        mock.insert_force("meat floss", "MadeOf", "cotton", vec![(0.147f64).ln()])
            .unwrap();
        mock
    }

    fn single_thread_pool() -> rayon::ThreadPool {
        rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap()
    }

    fn provenance(config_hash: &str) -> Provenance {
        Provenance {
            config_hash: config_hash.to_string(),
            registry_version: "test-v1".to_string(),
            template_version: mdpcc_core::expression::TEMPLATE_VERSION.to_string(),
            extractor_id: "mock:pipeline".to_string(),
            reasoner_id: "mock:pipeline".to_string(),
            created_unix: 0,
        }
    }

    #[test]
    fn one_article_end_to_end() {
        let registry = tiny_registry();
        let mock = pipeline_mock(&registry);
        let (augmented, audits) = augment_article(
            &article(),
            &registry,
            &extraction_config(),
            0.6,
            Ablation::Full,
            &mock,
            &mock,
        )
        .unwrap();

        assert_eq!(
            augmented.expression.text,
            "However, meat floss is made of meatloaf instead of cotton."
        );
        assert_eq!(
            augmented.augmented_text,
            format!("{} {}", article().text, augmented.expression.text)
        );

        // One extraction audit per relation, one scoring audit for the
        // single surviving triplet.
        let extraction_lines = audits
            .iter()
            .filter(|a| matches!(a, AuditLine::Extraction { .. }))
            .count();
        let scoring_lines = audits
            .iter()
            .filter(|a| matches!(a, AuditLine::Scoring { .. }))
            .count();
        assert_eq!(extraction_lines, registry.len());
        assert_eq!(scoring_lines, 1);
        if let AuditLine::Scoring { conflict_score, .. } = &audits[audits.len() - 1] {
            let expected = 1.0 - 0.147;
            assert!((conflict_score.unwrap() - expected).abs() < 1e-12);
        } else {
            panic!("last audit line should be the scoring stage");
        }
    }

    #[test]
    fn split_outcome_preserves_input_order_and_counts() {
        let registry = tiny_registry();
        let mock = pipeline_mock(&registry);
        let articles: Vec<LabeledArticle> = vec![
            article(),
            LabeledArticle {
                id: "a2".to_string(),
                text: "Nothing extractable here.".to_string(),
                label: Veracity::Real,
            },
        ];
        let split = DatasetSplit {
            name: SplitName::Train,
            articles,
        };
        let provenance = provenance("h1");
        let job = SplitJob {
            registry: &registry,
            extraction: &extraction_config(),
            mu: 0.6,
            ablation: Ablation::Full,
            provenance: &provenance,
            cache: None,
        };
        let pool = single_thread_pool();
        let outcome = augment_split(&split, &job, &mock, &mock, &pool).unwrap();

        assert_eq!(outcome.records.len(), 2);
        assert_eq!(outcome.records[0].article_id, "a1");
        assert_eq!(outcome.records[1].article_id, "a2");
        assert_eq!(outcome.record_hits, 0);

        let summary = SplitSummary::from_records(SplitName::Train, &outcome.records);
        assert_eq!(summary.articles, 2);
        assert_eq!(summary.conflicted, 1);
        assert_eq!(summary.empty_expressions, 1);
        let mean = summary.mean_conflict.unwrap();
        assert!((mean - (1.0 - 0.147)).abs() < 1e-12);
    }

    #[test]
    fn record_cache_short_circuits_the_backends() {
        let registry = tiny_registry();
        let mock = pipeline_mock(&registry);
        let split = DatasetSplit {
            name: SplitName::Train,
            articles: vec![article()],
        };
        let dir = tempfile::tempdir().unwrap();
        let cache = Arc::new(DiskCache::open(dir.path()).unwrap());
        let provenance = provenance("h1");
        let job = SplitJob {
            registry: &registry,
            extraction: &extraction_config(),
            mu: 0.6,
            ablation: Ablation::Full,
            provenance: &provenance,
            cache: Some(&cache),
        };
        let pool = single_thread_pool();

        let first = augment_split(&split, &job, &mock, &mock, &pool).unwrap();
        let calls_after_first = mock.total_calls();
        assert_eq!(first.record_hits, 0);
        assert!(calls_after_first > 0);

        let second = augment_split(&split, &job, &mock, &mock, &pool).unwrap();
        assert_eq!(second.record_hits, 1);
        assert_eq!(second.records, first.records);
        assert_eq!(second.audits, first.audits, "cache hits replay the audit trail");
        assert_eq!(mock.total_calls(), calls_after_first, "no new backend calls");
    }

    #[test]
    fn changed_config_hash_recomputes_instead_of_reusing() {
        let registry = tiny_registry();
        let mock = pipeline_mock(&registry);
        let split = DatasetSplit {
            name: SplitName::Train,
            articles: vec![article()],
        };
        let dir = tempfile::tempdir().unwrap();
        let cache = Arc::new(DiskCache::open(dir.path()).unwrap());
        let pool = single_thread_pool();
        let extraction = extraction_config();

        let p1 = provenance("h1");
        let job1 = SplitJob {
            registry: &registry,
            extraction: &extraction,
            mu: 0.6,
            ablation: Ablation::Full,
            provenance: &p1,
            cache: Some(&cache),
        };
        augment_split(&split, &job1, &mock, &mock, &pool).unwrap();
        let calls_after_first = mock.total_calls();

        let p2 = provenance("h2");
        let job2 = SplitJob {
            provenance: &p2,
            ..job1
        };
        let outcome = augment_split(&split, &job2, &mock, &mock, &pool).unwrap();
        assert_eq!(outcome.record_hits, 0, "different config digest, no reuse");
        assert!(mock.total_calls() > calls_after_first);
        assert_eq!(outcome.records[0].config_hash, "h2");
    }

    #[test]
    fn worker_count_does_not_change_the_output() {
        let registry = tiny_registry();
        let mock = pipeline_mock(&registry);
        let articles: Vec<LabeledArticle> = (0..12)
            .map(|i| LabeledArticle {
                id: format!("a{i}"),
                text: if i % 3 == 0 {
                    article().text
                } else {
                    format!("Filler article number {i}.")
                },
                label: if i % 2 == 0 { Veracity::Fake } else { Veracity::Real },
            })
            .collect();
        let split = DatasetSplit {
            name: SplitName::Train,
            articles,
        };
        let provenance = provenance("h1");
        let job = SplitJob {
            registry: &registry,
            extraction: &extraction_config(),
            mu: 0.6,
            ablation: Ablation::Full,
            provenance: &provenance,
            cache: None,
        };

        let pool1 = single_thread_pool();
        let pool4 = rayon::ThreadPoolBuilder::new()
            .num_threads(4)
            .build()
            .unwrap();
        let serial = augment_split(&split, &job, &mock, &mock, &pool1).unwrap();
        let parallel = augment_split(&split, &job, &mock, &mock, &pool4).unwrap();
        assert_eq!(serial.records, parallel.records);
    }

    struct DownExtractor;

    impl ExtractorBackend for DownExtractor {
        fn id(&self) -> &str {
            "down"
        }
        fn generate(
            &self,
            _prompt: &str,
        ) -> Result<GenerationResult, mdpcc_core::backends::BackendError> {
            Err(mdpcc_core::backends::BackendError::Unavailable {
                reason: "connection refused".into(),
            })
        }
    }

    #[test]
    fn backend_failures_identify_the_article_and_map_to_environment() {
        let registry = tiny_registry();
        let mock = pipeline_mock(&registry);
        let err = augment_article(
            &article(),
            &registry,
            &extraction_config(),
            0.6,
            Ablation::Full,
            &DownExtractor,
            &mock,
        )
        .unwrap_err();
        assert!(err.is_backend());
        assert!(err.to_string().contains("a1"), "{err}");

        let config_err = augment_article(
            &article(),
            &registry,
            &ExtractionConfig {
                epsilon: 0.0,
                ..extraction_config()
            },
            0.6,
            Ablation::Full,
            &mock,
            &mock,
        )
        .unwrap_err();
        assert!(!config_err.is_backend());
    }
}
