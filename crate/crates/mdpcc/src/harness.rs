//! Command implementations: each `run_*` function takes resolved settings,
//! orchestrates core algorithms with files and backends, writes its
//! artifacts under the output directory, and returns a machine-readable
//! result. Process exit codes derive from [`RunError::exit_code`]: bad
//! input is 1, a failing environment (backends, disks, processes) is 2.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use mdpcc_core::backends::{ExtractorBackend, ReasonerBackend};
use mdpcc_core::corpus::{SplitName, Veracity};
use mdpcc_core::detector::{
    assemble_input, encode_split, evaluate, multi_seed_run, BagOfTokensEncoder, DetectorModel,
    EncodeError, SeedRun, TextEncoder, TrainError,
};
use mdpcc_core::metrics::{MetricsError, MetricsReport, MetricsRow};
use serde::{Deserialize, Serialize};

use crate::backends::{build_backend, BackendRole, BackendSetupError, Cached};
use crate::cache::DiskCache;
use crate::config::{ConfigError, EncoderChoice, ResolvedConfig};
use crate::data::{
    load_dataset, read_augmented, record_timestamp, validate_stats, write_augmented, CorpusError,
    Provenance, RecordError, SplitReject, StatsReport,
};
use crate::embeddings::{EmbeddingError, PrecomputedEncoder};
use crate::pipeline::{augment_split, PipelineError, RunSummary, SplitJob, SplitSummary};

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Records(#[from] RecordError),
    #[error(transparent)]
    BackendSetup(#[from] BackendSetupError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Encode(#[from] EncodeError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("{0}")]
    Usage(String),
    #[error("{reason}")]
    Environment { reason: String },
}

impl RunError {
    /// Process exit code: 1 for problems in the inputs or settings, 2 for
    /// problems in the environment (backends, processes, disks).
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_)
            | RunError::Corpus(_)
            | RunError::Embedding(_)
            | RunError::Records(_)
            | RunError::Encode(_)
            | RunError::Train(_)
            | RunError::Metrics(_)
            | RunError::Usage(_) => 1,
            RunError::BackendSetup(_) | RunError::Environment { .. } => 2,
            RunError::Pipeline(e) => {
                if e.is_backend() {
                    2
                } else {
                    1
                }
            }
        }
    }
}

fn environment(reason: impl std::fmt::Display) -> RunError {
    RunError::Environment {
        reason: reason.to_string(),
    }
}

/// Atomic whole-file write (temp + rename) with parent creation.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), RunError> {
    let context = |e: std::io::Error| environment(format!("cannot write {}: {e}", path.display()));
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(context)?;
    }
    let tmp = path.with_extension(format!("tmp.{}", std::process::id()));
    fs::write(&tmp, bytes).map_err(context)?;
    fs::rename(&tmp, path).map_err(|e| {
        let _ = fs::remove_file(&tmp);
        context(e)
    })
}

fn write_json_atomic<T: Serialize>(path: &Path, value: &T) -> Result<(), RunError> {
    let mut body = serde_json::to_string_pretty(value).expect("artifact serializes");
    body.push('\n');
    write_atomic(path, body.as_bytes())
}

fn write_jsonl_atomic<T: Serialize>(path: &Path, lines: &[T]) -> Result<(), RunError> {
    let mut body = String::new();
    for line in lines {
        body.push_str(&serde_json::to_string(line).expect("artifact serializes"));
        body.push('\n');
    }
    write_atomic(path, body.as_bytes())
}

/// Result of an augment run: the summary that was written to disk plus any
/// corpus lines that were rejected while loading.
pub struct AugmentOutput {
    pub summary: RunSummary,
    pub rejects: Vec<SplitReject>,
}

/// Augments all three splits of the corpus: writes
/// `augmented-{split}.jsonl` and `audit-{split}.jsonl` per split and
/// `summary.json` at the output root.
pub fn run_augment(config: &ResolvedConfig) -> Result<AugmentOutput, RunError> {
    let (dataset, rejects) = load_dataset(&config.corpus_dir)?;

    let cache = if config.cache_enabled {
        let cache = DiskCache::open(&config.cache_dir)
            .map_err(|e| environment(format!("cannot open cache at {}: {e}", config.cache_dir.display())))?;
        Some(Arc::new(cache))
    } else {
        None
    };

    let max_new_tokens = Some(config.extraction.max_new_tokens);
    let extractor = Cached::new(
        build_backend(
            config.backend_kind(BackendRole::Extractor)?,
            &config.base_dir,
            max_new_tokens,
        )?,
        cache.clone(),
    );
    let reasoner = Cached::new(
        build_backend(
            config.backend_kind(BackendRole::Reasoner)?,
            &config.base_dir,
            max_new_tokens,
        )?,
        cache.clone(),
    );
    let extractor_id = ExtractorBackend::id(&extractor).to_string();
    let reasoner_id = ReasonerBackend::id(&reasoner).to_string();

    let config_hash = config.config_hash(&extractor_id, &reasoner_id);
    let provenance = Provenance {
        config_hash: config_hash.clone(),
        registry_version: config.registry.version().to_string(),
        template_version: mdpcc_core::expression::TEMPLATE_VERSION.to_string(),
        extractor_id: extractor_id.clone(),
        reasoner_id: reasoner_id.clone(),
        created_unix: record_timestamp(),
    };

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers)
        .build()
        .map_err(|e| environment(format!("cannot start worker pool: {e}")))?;
    let job = SplitJob {
        registry: &config.registry,
        extraction: &config.extraction,
        mu: config.mu,
        ablation: config.ablation,
        provenance: &provenance,
        cache: cache.as_ref(),
    };

    let mut splits = Vec::with_capacity(3);
    let mut record_cache_hits = 0u64;
    for split in dataset.splits() {
        let outcome = augment_split(split, &job, &extractor, &reasoner, &pool)?;
        write_augmented(&config.augmented_path(split.name), &outcome.records)
            .map_err(environment)?;
        write_jsonl_atomic(&config.audit_path(split.name), &outcome.audits)?;
        record_cache_hits += outcome.record_hits;
        let mut summary = SplitSummary::from_records(split.name, &outcome.records);
        summary.filter_drops = SplitSummary::count_filter_drops(&outcome.audits);
        splits.push(summary);
    }

    let summary = RunSummary {
        config_hash,
        extractor_id,
        reasoner_id,
        splits,
        extractor_calls: extractor.inner_calls(),
        reasoner_calls: reasoner.inner_calls(),
        generation_cache_hits: extractor.hits() + reasoner.hits(),
        record_cache_hits,
    };
    write_json_atomic(&config.summary_path(), &summary)?;
    Ok(AugmentOutput { summary, rejects })
}

/// `(text, label)` pairs ready for the detector, per split.
struct DetectorInputs {
    train: Vec<(String, Veracity)>,
    val: Vec<(String, Veracity)>,
    test: Vec<(String, Veracity)>,
    /// Config digest carried by the augmented records (absent in raw mode).
    config_hash: Option<String>,
}

/// Loads detector inputs. Raw mode reads the corpus directly; otherwise
/// the augmented artifacts from a prior augment run are used, and the
/// expression is guaranteed to survive the token budget.
fn load_detector_inputs(config: &ResolvedConfig) -> Result<DetectorInputs, RunError> {
    let max_tokens = config.train.max_tokens;
    if config.raw {
        let (dataset, _) = load_dataset(&config.corpus_dir)?;
        let convert = |split: SplitName| {
            dataset
                .split(split)
                .articles
                .iter()
                .map(|a| (assemble_input(&a.text, "", max_tokens), a.label))
                .collect()
        };
        return Ok(DetectorInputs {
            train: convert(SplitName::Train),
            val: convert(SplitName::Val),
            test: convert(SplitName::Test),
            config_hash: None,
        });
    }

    let mut config_hash: Option<String> = None;
    let mut load = |split: SplitName| -> Result<Vec<(String, Veracity)>, RunError> {
        let path = config.augmented_path(split);
        let records = read_augmented(&path).map_err(|e| match e {
            RecordError::Io { ref source, .. }
                if source.kind() == std::io::ErrorKind::NotFound =>
            {
                RunError::Environment {
                    reason: format!(
                        "{} not found; run `mdpcc augment` first, or pass --raw to train on \
                         unaugmented articles",
                        path.display()
                    ),
                }
            }
            other => RunError::Records(other),
        })?;
        for record in &records {
            match &config_hash {
                None => config_hash = Some(record.config_hash.clone()),
                Some(expected) if *expected == record.config_hash => {}
                Some(expected) => {
                    return Err(RunError::Usage(format!(
                        "{} mixes augmentation outputs (config {} vs {}); rerun `mdpcc augment`",
                        path.display(),
                        &expected[..12.min(expected.len())],
                        &record.config_hash[..12.min(record.config_hash.len())],
                    )))
                }
            }
        }
        Ok(records
            .iter()
            .map(|r| {
                (
                    assemble_input(&r.original_text, &r.expression.text, max_tokens),
                    r.label,
                )
            })
            .collect())
    };
    Ok(DetectorInputs {
        train: load(SplitName::Train)?,
        val: load(SplitName::Val)?,
        test: load(SplitName::Test)?,
        config_hash,
    })
}

fn build_encoder(config: &ResolvedConfig) -> Result<Box<dyn TextEncoder>, RunError> {
    Ok(match &config.encoder {
        EncoderChoice::Bag => Box::new(BagOfTokensEncoder),
        EncoderChoice::Precomputed(path) => Box::new(PrecomputedEncoder::load(path)?),
    })
}

fn encode_pairs(
    encoder: &dyn TextEncoder,
    pairs: &[(String, Veracity)],
) -> Result<Vec<mdpcc_core::detector::EncodedExample>, RunError> {
    Ok(encode_split(
        &encoder,
        pairs.iter().map(|(text, label)| (text.as_str(), *label)),
    )?)
}

/// A trained detector in portable sparse form: only coordinates that moved
/// away from their initialization are stored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub seed: u64,
    pub encoder_id: String,
    pub width: usize,
    pub bias: f64,
    pub weights_nonzero: Vec<(usize, f64)>,
    pub scale_nonone: Vec<(usize, f64)>,
    pub best_epoch: u32,
    pub val_metrics: MetricsRow,
    pub test_metrics: MetricsRow,
}

impl Checkpoint {
    pub fn from_run(run: &SeedRun, encoder_id: &str, width: usize) -> Self {
        let model = &run.outcome.model;
        Self {
            seed: run.seed,
            encoder_id: encoder_id.to_string(),
            width,
            bias: model.bias,
            weights_nonzero: model
                .weights
                .iter()
                .enumerate()
                .filter(|(_, w)| **w != 0.0)
                .map(|(i, w)| (i, *w))
                .collect(),
            scale_nonone: model
                .scale
                .iter()
                .enumerate()
                .filter(|(_, s)| **s != 1.0)
                .map(|(i, s)| (i, *s))
                .collect(),
            best_epoch: run.outcome.best_epoch,
            val_metrics: run.outcome.best_val_metrics,
            test_metrics: run.test.metrics,
        }
    }

    pub fn to_model(&self) -> DetectorModel {
        let mut model = DetectorModel::new(self.width);
        model.bias = self.bias;
        for &(i, w) in &self.weights_nonzero {
            model.weights[i] = w;
        }
        for &(i, s) in &self.scale_nonone {
            model.scale[i] = s;
        }
        model
    }
}

/// One row of the training report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRow {
    pub seed: u64,
    pub best_epoch: u32,
    pub epochs_run: u32,
    pub val: MetricsRow,
    pub test: MetricsRow,
}

/// Training report persisted as `report.json` (and rendered to
/// `report.txt`). On a seed failure, the rows completed before it are
/// still reported and the failure is recorded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub encoder_id: String,
    pub raw: bool,
    /// Digest of the augment settings the inputs were built with.
    pub config_hash: Option<String>,
    pub seeds: Vec<u64>,
    pub rows: Vec<SeedRow>,
    pub test_mean: Option<MetricsRow>,
    pub test_std: Option<MetricsRow>,
    pub failure: Option<String>,
}

impl TrainReport {
    /// Human-readable rendering, one line per seed plus the aggregate.
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "encoder: {}  inputs: {}\n",
            self.encoder_id,
            if self.raw { "raw" } else { "augmented" }
        ));
        for row in &self.rows {
            out.push_str(&format!(
                "seed {}: best epoch {} of {}, val macro F1 {:.2}, test macro F1 {:.2}\n",
                row.seed, row.best_epoch, row.epochs_run, row.val.macro_f1, row.test.macro_f1
            ));
        }
        if let (Some(mean), Some(std)) = (&self.test_mean, &self.test_std) {
            out.push_str(&format!(
                "test macro F1 {}  accuracy {}  precision {}  recall {}\n",
                MetricsReport::format_pm(mean.macro_f1, std.macro_f1),
                MetricsReport::format_pm(mean.accuracy, std.accuracy),
                MetricsReport::format_pm(mean.precision, std.precision),
                MetricsReport::format_pm(mean.recall, std.recall),
            ));
        }
        if let Some(failure) = &self.failure {
            out.push_str(&format!("FAILED: {failure}\n"));
        }
        out
    }
}

/// Trains the detector once per seed on (augmented or raw) articles,
/// writing per-seed checkpoints, `report.json`, and `report.txt`. A seed
/// failure still produces a report with the completed rows.
pub fn run_train(config: &ResolvedConfig) -> Result<TrainReport, RunError> {
    let inputs = load_detector_inputs(config)?;
    let encoder = build_encoder(config)?;
    let train_set = encode_pairs(&*encoder, &inputs.train)?;
    let val_set = encode_pairs(&*encoder, &inputs.val)?;
    let test_set = encode_pairs(&*encoder, &inputs.test)?;

    let multi = multi_seed_run(&*encoder, &train_set, &val_set, &test_set, &config.train);

    for run in &multi.runs {
        let checkpoint = Checkpoint::from_run(run, encoder.id(), encoder.width());
        write_json_atomic(&config.checkpoint_path(run.seed), &checkpoint)?;
    }

    let rows: Vec<SeedRow> = multi
        .runs
        .iter()
        .map(|run| SeedRow {
            seed: run.seed,
            best_epoch: run.outcome.best_epoch,
            epochs_run: run.outcome.epochs_run,
            val: run.outcome.best_val_metrics,
            test: run.test.metrics,
        })
        .collect();
    let aggregated = multi.test_report().ok();
    let report = TrainReport {
        encoder_id: encoder.id().to_string(),
        raw: config.raw,
        config_hash: inputs.config_hash,
        seeds: config.train.seeds.clone(),
        rows,
        test_mean: aggregated.as_ref().map(|r| r.mean),
        test_std: aggregated.as_ref().map(|r| r.std),
        failure: multi
            .failure
            .as_ref()
            .map(|f| format!("seed {}: {}", f.seed, f.error)),
    };
    write_json_atomic(&config.report_path(), &report)?;
    write_atomic(&config.report_text_path(), report.render_text().as_bytes())?;
    Ok(report)
}

/// Re-evaluates stored checkpoints on the test split and aggregates the
/// metrics across seeds.
pub fn run_eval(config: &ResolvedConfig) -> Result<MetricsReport, RunError> {
    let inputs = load_detector_inputs(config)?;
    let encoder = build_encoder(config)?;
    let test_set = encode_pairs(&*encoder, &inputs.test)?;

    let mut rows = Vec::with_capacity(config.train.seeds.len());
    for &seed in &config.train.seeds {
        let path = config.checkpoint_path(seed);
        let content = fs::read_to_string(&path).map_err(|e| {
            environment(format!(
                "cannot read checkpoint {} ({e}); run `mdpcc train` first",
                path.display()
            ))
        })?;
        let checkpoint: Checkpoint = serde_json::from_str(&content)
            .map_err(|e| environment(format!("corrupt checkpoint {}: {e}", path.display())))?;
        if checkpoint.width != encoder.width() || checkpoint.encoder_id != encoder.id() {
            return Err(RunError::Usage(format!(
                "checkpoint {} was trained with encoder {} (width {}), current encoder is {} \
                 (width {})",
                path.display(),
                checkpoint.encoder_id,
                checkpoint.width,
                encoder.id(),
                encoder.width()
            )));
        }
        let evaluation = evaluate(&checkpoint.to_model(), &test_set)?;
        rows.push((seed, evaluation.metrics));
    }
    Ok(MetricsReport::aggregate(rows)?)
}

/// One successful sweep point.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub k: usize,
    pub test_macro_f1_mean: f64,
    pub test_macro_f1_std: f64,
}

pub struct SweepOutput {
    pub rows: Vec<SweepRow>,
    /// `(k, error)` pairs for sweep points that failed.
    pub failures: Vec<(usize, String)>,
    pub table_path: PathBuf,
}

/// Runs augment + train for each requested in-context example count.
/// Outputs land under `out/sweep/k-N/`; the generation cache is shared
/// across points, so reasoner calls for unchanged triplets are reused.
/// The aggregate table is written to `out/sweep.tsv` either way; failed
/// points are reported, not silently dropped.
pub fn run_sweep_k(config: &ResolvedConfig, values: &[usize]) -> Result<SweepOutput, RunError> {
    if values.is_empty() {
        return Err(RunError::Usage(
            "sweep needs at least one value of k (pass --values 0,1,5)".to_string(),
        ));
    }
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for &k in values {
        let mut point = config.clone();
        point.extraction.k = k;
        point.out_dir = config.out_dir.join("sweep").join(format!("k-{k}"));
        // The cache directory stays shared on purpose; its keys already
        // incorporate everything k changes.
        let result = run_augment(&point).and_then(|_| run_train(&point));
        match result {
            Ok(report) => match (&report.failure, &report.test_mean, &report.test_std) {
                (None, Some(mean), Some(std)) => rows.push(SweepRow {
                    k,
                    test_macro_f1_mean: mean.macro_f1,
                    test_macro_f1_std: std.macro_f1,
                }),
                (failure, _, _) => failures.push((
                    k,
                    failure
                        .clone()
                        .unwrap_or_else(|| "no seed completed".to_string()),
                )),
            },
            Err(e) => failures.push((k, e.to_string())),
        }
    }

    let mut table = String::from("k\ttest_macro_f1_mean\ttest_macro_f1_std\n");
    for row in &rows {
        table.push_str(&format!(
            "{}\t{:.4}\t{:.4}\n",
            row.k, row.test_macro_f1_mean, row.test_macro_f1_std
        ));
    }
    let table_path = config.out_dir.join("sweep.tsv");
    write_atomic(&table_path, table.as_bytes())?;
    Ok(SweepOutput {
        rows,
        failures,
        table_path,
    })
}

/// Loads a corpus and checks its per-split class counts against the
/// published statistics for `dataset_name`.
pub fn run_validate_stats(corpus_dir: &Path, dataset_name: &str) -> Result<StatsReport, RunError> {
    let (dataset, _) = load_dataset(corpus_dir)?;
    validate_stats(dataset_name, &dataset).map_err(RunError::Usage)
}
