//! Corpus and artifact file formats: JSONL corpora with a rejects report,
//! round-trip-safe augmentation records, and the expected-statistics check
//! for the five reference datasets.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use mdpcc_core::corpus::{DatasetSplit, LabeledArticle, SplitName, Veracity};
use mdpcc_core::expression::{AugmentedArticle, CommonsenseExpression};
use serde::{Deserialize, Serialize};

/// Parse failures above this fraction of a corpus file abort the load
/// instead of being reported; a corpus that malformed is the wrong file.
pub const MAX_REJECT_RATE: f64 = 0.01;

/// One corpus line that failed to parse, with the reason it was dropped.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RejectedLine {
    pub line: usize,
    pub reason: String,
}

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("cannot read corpus file {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path} line {line}: duplicate article id `{id}`")]
    DuplicateId {
        path: PathBuf,
        line: usize,
        id: String,
    },
    #[error(
        "{path} has {rejected} malformed lines out of {total} (over the {limit}% limit); \
         first: line {first_line}: {first_reason}"
    )]
    RejectRate {
        path: PathBuf,
        rejected: usize,
        total: usize,
        limit: f64,
        first_line: usize,
        first_reason: String,
    },
}

impl CorpusError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        CorpusError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// Loads one split from a JSONL file: one `{id, text, label}` object per
/// line, blank lines skipped. Malformed lines (bad JSON, labels outside
/// {0, 1}, empty text) are collected into the rejects report; more than
/// [`MAX_REJECT_RATE`] of them, or any duplicate id, aborts the load.
pub fn load_split(
    path: &Path,
    name: SplitName,
) -> Result<(DatasetSplit, Vec<RejectedLine>), CorpusError> {
    let content = fs::read_to_string(path).map_err(|e| CorpusError::io(path, e))?;
    let mut articles = Vec::new();
    let mut rejects = Vec::new();
    let mut seen_ids = BTreeSet::new();
    let mut total = 0usize;

    for (idx, raw) in content.lines().enumerate() {
        let line = idx + 1;
        let raw = raw.trim();
        if raw.is_empty() {
            continue;
        }
        total += 1;
        let article: LabeledArticle = match serde_json::from_str(raw) {
            Ok(article) => article,
            Err(e) => {
                rejects.push(RejectedLine {
                    line,
                    reason: e.to_string(),
                });
                continue;
            }
        };
        if article.text.trim().is_empty() {
            rejects.push(RejectedLine {
                line,
                reason: "empty text".to_string(),
            });
            continue;
        }
        if !seen_ids.insert(article.id.clone()) {
            return Err(CorpusError::DuplicateId {
                path: path.to_path_buf(),
                line,
                id: article.id,
            });
        }
        articles.push(article);
    }

    if !rejects.is_empty() && (rejects.len() as f64) > (total as f64) * MAX_REJECT_RATE {
        let first = &rejects[0];
        return Err(CorpusError::RejectRate {
            path: path.to_path_buf(),
            rejected: rejects.len(),
            total,
            limit: MAX_REJECT_RATE * 100.0,
            first_line: first.line,
            first_reason: first.reason.clone(),
        });
    }

    Ok((DatasetSplit { name, articles }, rejects))
}

/// A dataset's three splits.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: DatasetSplit,
    pub val: DatasetSplit,
    pub test: DatasetSplit,
}

impl Dataset {
    pub fn split(&self, name: SplitName) -> &DatasetSplit {
        match name {
            SplitName::Train => &self.train,
            SplitName::Val => &self.val,
            SplitName::Test => &self.test,
        }
    }

    pub fn splits(&self) -> [&DatasetSplit; 3] {
        [&self.train, &self.val, &self.test]
    }
}

/// A reject with the split it came from, for dataset-level reporting.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SplitReject {
    pub split: SplitName,
    pub line: usize,
    pub reason: String,
}

/// Loads `train.jsonl`, `val.jsonl`, `test.jsonl` from a directory.
pub fn load_dataset(dir: &Path) -> Result<(Dataset, Vec<SplitReject>), CorpusError> {
    let mut rejects = Vec::new();
    let mut load = |name: SplitName| -> Result<DatasetSplit, CorpusError> {
        let path = dir.join(format!("{}.jsonl", name.as_str()));
        let (split, split_rejects) = load_split(&path, name)?;
        rejects.extend(split_rejects.into_iter().map(|r| SplitReject {
            split: name,
            line: r.line,
            reason: r.reason,
        }));
        Ok(split)
    };
    let dataset = Dataset {
        train: load(SplitName::Train)?,
        val: load(SplitName::Val)?,
        test: load(SplitName::Test)?,
    };
    Ok((dataset, rejects))
}

/// Pipeline identity stamped onto every augmentation record: enough to
/// tell whether a stored record is reusable under the current settings.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub registry_version: String,
    pub template_version: String,
    pub extractor_id: String,
    pub reasoner_id: String,
    pub created_unix: u64,
}

/// One augmented article as persisted to disk: the augmentation result
/// plus full provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationRecord {
    pub article_id: String,
    pub original_text: String,
    pub label: Veracity,
    pub expression: CommonsenseExpression,
    pub augmented_text: String,
    pub config_hash: String,
    pub registry_version: String,
    pub template_version: String,
    pub extractor_id: String,
    pub reasoner_id: String,
    pub created_unix: u64,
}

impl AugmentationRecord {
    pub fn new(article: AugmentedArticle, provenance: &Provenance) -> Self {
        Self {
            article_id: article.article_id,
            original_text: article.original_text,
            label: article.label,
            expression: article.expression,
            augmented_text: article.augmented_text,
            config_hash: provenance.config_hash.clone(),
            registry_version: provenance.registry_version.clone(),
            template_version: provenance.template_version.clone(),
            extractor_id: provenance.extractor_id.clone(),
            reasoner_id: provenance.reasoner_id.clone(),
            created_unix: provenance.created_unix,
        }
    }
}

/// Timestamp for new records: `SOURCE_DATE_EPOCH` when set (so rebuilds
/// can be byte-identical), otherwise the current time.
pub fn record_timestamp() -> u64 {
    if let Some(epoch) = std::env::var("SOURCE_DATE_EPOCH")
        .ok()
        .and_then(|v| v.trim().parse().ok())
    {
        return epoch;
    }
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

#[derive(Debug, thiserror::Error)]
pub enum RecordError {
    #[error("cannot access {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path} is truncated: the file does not end with a newline")]
    Truncated { path: PathBuf },
    #[error("{path} line {line}: {message}")]
    Line {
        path: PathBuf,
        line: usize,
        message: String,
    },
}

/// Writes augmentation records as JSONL, atomically: the whole file is
/// staged under a temporary name and renamed into place, so readers never
/// observe a half-written file.
pub fn write_augmented(path: &Path, records: &[AugmentationRecord]) -> Result<(), RecordError> {
    let io_err = |source| RecordError::Io {
        path: path.to_path_buf(),
        source,
    };
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err)?;
    }
    let mut buffer = Vec::new();
    for record in records {
        serde_json::to_writer(&mut buffer, record).expect("record serializes");
        buffer.push(b'\n');
    }
    let tmp = path.with_extension(format!("tmp.{}", std::process::id()));
    fs::write(&tmp, &buffer).map_err(io_err)?;
    fs::rename(&tmp, path).map_err(|e| {
        let _ = fs::remove_file(&tmp);
        io_err(e)
    })
}

/// Reads augmentation records back. A file that does not end in a newline
/// was cut off mid-write and is reported as truncated rather than parsed
/// partially.
pub fn read_augmented(path: &Path) -> Result<Vec<AugmentationRecord>, RecordError> {
    let content = fs::read_to_string(path).map_err(|source| RecordError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    if !content.is_empty() && !content.ends_with('\n') {
        return Err(RecordError::Truncated {
            path: path.to_path_buf(),
        });
    }
    let mut records = Vec::new();
    for (idx, raw) in content.lines().enumerate() {
        let raw = raw.trim();
        if raw.is_empty() {
            continue;
        }
        let record = serde_json::from_str(raw).map_err(|e| RecordError::Line {
            path: path.to_path_buf(),
            line: idx + 1,
            message: e.to_string(),
        })?;
        records.push(record);
    }
    Ok(records)
}

/// Published per-split fake/real counts, in train/val/test order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ExpectedCounts {
    pub fake: usize,
    pub real: usize,
}

/// Reference statistics for the five benchmark corpora.
pub const EXPECTED_STATS: &[(&str, [ExpectedCounts; 3])] = &[
    ("weibo", stats([2561, 7660, 499, 1918, 754, 2957])),
    ("gossipcop", stats([2024, 5039, 604, 1774, 601, 1758])),
    ("politifact", stats([1224, 1344, 170, 186, 307, 337])),
    ("snopes", stats([2288, 838, 317, 116, 572, 210])),
    ("comis", stats([560, 440, 170, 125, 162, 123])),
];

const fn stats(n: [usize; 6]) -> [ExpectedCounts; 3] {
    [
        ExpectedCounts { fake: n[0], real: n[1] },
        ExpectedCounts { fake: n[2], real: n[3] },
        ExpectedCounts { fake: n[4], real: n[5] },
    ]
}

/// Looks up the published statistics for a dataset, case-insensitively.
pub fn expected_stats(dataset: &str) -> Option<&'static [ExpectedCounts; 3]> {
    let wanted = dataset.to_ascii_lowercase();
    EXPECTED_STATS
        .iter()
        .find(|(name, _)| *name == wanted)
        .map(|(_, counts)| counts)
}

/// One cell of the statistics check: a split × class count comparison.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct StatsCell {
    pub split: SplitName,
    pub class: &'static str,
    pub expected: usize,
    pub found: usize,
    pub pass: bool,
}

/// Per-cell comparison of a loaded dataset against published statistics.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct StatsReport {
    pub dataset: String,
    pub cells: Vec<StatsCell>,
    pub all_pass: bool,
}

impl StatsReport {
    pub fn failing_cells(&self) -> usize {
        self.cells.iter().filter(|c| !c.pass).count()
    }
}

/// Compares a dataset's per-split fake/real counts against the published
/// statistics. Errors only when the dataset name is unknown; mismatches
/// are reported per cell, not raised.
pub fn validate_stats(dataset_name: &str, dataset: &Dataset) -> Result<StatsReport, String> {
    let expected = expected_stats(dataset_name).ok_or_else(|| {
        let known: Vec<&str> = EXPECTED_STATS.iter().map(|(name, _)| *name).collect();
        format!(
            "no published statistics for `{dataset_name}` (known: {})",
            known.join(", ")
        )
    })?;
    let mut cells = Vec::with_capacity(6);
    for (split, expected) in SplitName::ALL.iter().zip(expected) {
        let (fake, real) = dataset.split(*split).counts();
        for (class, expected, found) in
            [("fake", expected.fake, fake), ("real", expected.real, real)]
        {
            cells.push(StatsCell {
                split: *split,
                class,
                expected,
                found,
                pass: expected == found,
            });
        }
    }
    let all_pass = cells.iter().all(|c| c.pass);
    Ok(StatsReport {
        dataset: dataset_name.to_string(),
        cells,
        all_pass,
    })
}
