//! Layered run configuration: an optional TOML file, command-line
//! overrides on top, and built-in defaults underneath, resolved into one
//! concrete settings value. The pipeline-relevant subset hashes into a
//! config digest that stamps every augmentation record, so artifacts can
//! be matched to the settings that produced them.

use std::path::{Path, PathBuf};

use mdpcc_core::expression::{Ablation, TEMPLATE_VERSION};
use mdpcc_core::extraction::ExtractionConfig;
use mdpcc_core::corpus::SplitName;
use mdpcc_core::detector::TrainConfig;
use mdpcc_core::relations::{default_registry, RelationRegistry};
use serde::Deserialize;

use crate::backends::{BackendKind, BackendRole};
use crate::cache::sha256_hex;

/// Conflict threshold μ above which the contrastive template is used.
pub const DEFAULT_MU: f64 = 0.6;

/// TOML file shape. Every field is optional; the file only needs to state
/// what differs from the defaults.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub corpus_dir: Option<String>,
    pub out_dir: Option<String>,
    pub workers: Option<usize>,
    pub raw: Option<bool>,
    #[serde(default)]
    pub cache: CacheSection,
    #[serde(default)]
    pub registry: RegistrySection,
    #[serde(default)]
    pub extraction: ExtractionSection,
    #[serde(default)]
    pub expression: ExpressionSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub backends: BackendsSection,
    #[serde(default)]
    pub encoder: EncoderSection,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CacheSection {
    pub enabled: Option<bool>,
    pub dir: Option<String>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegistrySection {
    pub path: Option<String>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtractionSection {
    pub k: Option<usize>,
    pub epsilon: Option<f64>,
    pub max_new_tokens: Option<u32>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpressionSection {
    pub mu: Option<f64>,
    pub ablation: Option<Ablation>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub encoder_lr: Option<f64>,
    pub head_lr: Option<f64>,
    pub batch_size: Option<usize>,
    pub patience: Option<u32>,
    pub max_epochs: Option<u32>,
    pub max_tokens: Option<usize>,
    pub seeds: Option<Vec<u64>>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendsSection {
    pub extractor: Option<String>,
    pub reasoner: Option<String>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderSection {
    pub kind: Option<String>,
}

/// Command-line overrides, already parsed. Everything here wins over the
/// config file.
#[derive(Debug, Default)]
pub struct Overrides {
    pub config: Option<PathBuf>,
    pub corpus: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub k: Option<usize>,
    pub epsilon: Option<f64>,
    pub mu: Option<f64>,
    pub ablation: Option<Ablation>,
    pub seeds: Option<Vec<u64>>,
    pub raw: bool,
    pub backends: Vec<(BackendRole, BackendKind)>,
    pub cache_dir: Option<PathBuf>,
    pub workers: Option<usize>,
}

/// Text encoder selection for the detector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EncoderChoice {
    /// Hashed bag-of-tokens (built in, deterministic, no files needed).
    Bag,
    /// Precomputed embedding table loaded from a JSONL file.
    Precomputed(PathBuf),
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config file {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("config file {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("relation registry {path}: {message}")]
    Registry { path: PathBuf, message: String },
    #[error("missing setting: {what} ({hint})")]
    Missing { what: &'static str, hint: &'static str },
    #[error("invalid setting: {reason}")]
    Invalid { reason: String },
}

/// Fully resolved run settings.
#[derive(Debug, Clone)]
pub struct ResolvedConfig {
    pub corpus_dir: PathBuf,
    pub out_dir: PathBuf,
    pub registry: RelationRegistry,
    pub cache_enabled: bool,
    pub cache_dir: PathBuf,
    pub extraction: ExtractionConfig,
    pub mu: f64,
    pub ablation: Ablation,
    pub train: TrainConfig,
    pub encoder: EncoderChoice,
    pub extractor_kind: Option<BackendKind>,
    pub reasoner_kind: Option<BackendKind>,
    /// Worker threads for augmentation; 0 lets the runtime decide.
    pub workers: usize,
    pub raw: bool,
    /// Directory that relative backend fixture paths resolve against: the
    /// config file's directory, or the working directory without one.
    pub base_dir: PathBuf,
}

impl ResolvedConfig {
    /// Digest of every setting that changes augmentation output. Two runs
    /// with equal hashes (and equal corpora) produce identical records.
    pub fn config_hash(&self, extractor_id: &str, reasoner_id: &str) -> String {
        // serde_json maps iterate in sorted key order, so this
        // serialization is canonical.
        let payload = serde_json::json!({
            "k": self.extraction.k,
            "epsilon_bits": self.extraction.epsilon.to_bits(),
            "mu_bits": self.mu.to_bits(),
            "ablation": self.ablation.as_str(),
            "max_new_tokens": self.extraction.max_new_tokens,
            "registry_version": self.registry.version(),
            "template_version": TEMPLATE_VERSION,
            "extractor_id": extractor_id,
            "reasoner_id": reasoner_id,
        });
        sha256_hex(&[payload.to_string().as_bytes()])
    }

    pub fn augmented_path(&self, split: SplitName) -> PathBuf {
        self.out_dir
            .join(format!("augmented-{}.jsonl", split.as_str()))
    }

    pub fn audit_path(&self, split: SplitName) -> PathBuf {
        self.out_dir.join(format!("audit-{}.jsonl", split.as_str()))
    }

    pub fn summary_path(&self) -> PathBuf {
        self.out_dir.join("summary.json")
    }

    pub fn report_path(&self) -> PathBuf {
        self.out_dir.join("report.json")
    }

    pub fn report_text_path(&self) -> PathBuf {
        self.out_dir.join("report.txt")
    }

    pub fn checkpoint_path(&self, seed: u64) -> PathBuf {
        self.out_dir.join("checkpoints").join(format!("seed-{seed}.json"))
    }

    pub fn backend_kind(&self, role: BackendRole) -> Result<&BackendKind, ConfigError> {
        let (kind, what, hint) = match role {
            BackendRole::Extractor => (
                &self.extractor_kind,
                "extractor backend",
                "pass --backend extractor=KIND or set [backends] extractor in the config file",
            ),
            BackendRole::Reasoner => (
                &self.reasoner_kind,
                "reasoner backend",
                "pass --backend reasoner=KIND or set [backends] reasoner in the config file",
            ),
        };
        kind.as_ref().ok_or(ConfigError::Missing { what, hint })
    }
}

fn resolve_path(base: &Path, value: &str) -> PathBuf {
    let path = PathBuf::from(value);
    if path.is_absolute() {
        path
    } else {
        base.join(path)
    }
}

/// Resolves settings from the override set, reading the config file when
/// one is named. Relative paths inside the file are taken relative to the
/// file's own directory; relative paths from flags stay relative to the
/// working directory.
pub fn resolve(overrides: Overrides) -> Result<ResolvedConfig, ConfigError> {
    let env_cache_dir = std::env::var("MDPCC_CACHE_DIR").ok().map(PathBuf::from);
    resolve_with_env(overrides, env_cache_dir)
}

fn resolve_with_env(
    overrides: Overrides,
    env_cache_dir: Option<PathBuf>,
) -> Result<ResolvedConfig, ConfigError> {
    let (file, base_dir) = match &overrides.config {
        Some(path) => {
            let content = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
                path: path.clone(),
                source,
            })?;
            let file: FileConfig =
                toml::from_str(&content).map_err(|e| ConfigError::Parse {
                    path: path.clone(),
                    message: e.to_string(),
                })?;
            let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
            (file, base)
        }
        None => (FileConfig::default(), PathBuf::from(".")),
    };

    let corpus_dir = overrides
        .corpus
        .clone()
        .or_else(|| file.corpus_dir.as_deref().map(|p| resolve_path(&base_dir, p)))
        .ok_or(ConfigError::Missing {
            what: "corpus directory",
            hint: "pass --corpus DIR or set corpus_dir in the config file",
        })?;

    let out_dir = overrides
        .out
        .clone()
        .or_else(|| file.out_dir.as_deref().map(|p| resolve_path(&base_dir, p)))
        .unwrap_or_else(|| PathBuf::from("out"));

    let registry = match &file.registry.path {
        Some(path) => {
            let resolved = resolve_path(&base_dir, path);
            let src = std::fs::read_to_string(&resolved).map_err(|e| ConfigError::Registry {
                path: resolved.clone(),
                message: e.to_string(),
            })?;
            RelationRegistry::parse_jsonl(&src).map_err(|e| ConfigError::Registry {
                path: resolved,
                message: e.to_string(),
            })?
        }
        None => default_registry(),
    };

    let cache_enabled = file.cache.enabled.unwrap_or(true);
    let cache_dir = overrides
        .cache_dir
        .clone()
        .or(env_cache_dir)
        .or_else(|| file.cache.dir.as_deref().map(|p| resolve_path(&base_dir, p)))
        .unwrap_or_else(|| out_dir.join("cache"));

    let defaults = ExtractionConfig::default();
    let mut extraction = ExtractionConfig {
        k: overrides.k.or(file.extraction.k).unwrap_or(defaults.k),
        epsilon: overrides
            .epsilon
            .or(file.extraction.epsilon)
            .unwrap_or(defaults.epsilon),
        max_new_tokens: file
            .extraction
            .max_new_tokens
            .unwrap_or(defaults.max_new_tokens),
    };
    extraction.validate().map_err(|e| ConfigError::Invalid {
        reason: e.to_string(),
    })?;

    let mu = overrides
        .mu
        .or(file.expression.mu)
        .unwrap_or(DEFAULT_MU);
    if !mu.is_finite() {
        return Err(ConfigError::Invalid {
            reason: format!("mu must be finite, got {mu}"),
        });
    }

    let mut ablation = overrides
        .ablation
        .or(file.expression.ablation)
        .unwrap_or(Ablation::Full);
    // Dropping in-context examples is exactly k = 0 with the grammar
    // unchanged; canonicalizing here keeps the two spellings byte-identical
    // downstream (records, hashes, caches).
    if ablation == Ablation::NoIcl {
        ablation = Ablation::Full;
        extraction.k = 0;
    }

    let train_defaults = TrainConfig::default();
    let train = TrainConfig {
        encoder_lr: file.train.encoder_lr.unwrap_or(train_defaults.encoder_lr),
        head_lr: file.train.head_lr.unwrap_or(train_defaults.head_lr),
        batch_size: file.train.batch_size.unwrap_or(train_defaults.batch_size),
        patience: file.train.patience.unwrap_or(train_defaults.patience),
        max_epochs: file.train.max_epochs.unwrap_or(train_defaults.max_epochs),
        max_tokens: file.train.max_tokens.unwrap_or(train_defaults.max_tokens),
        seeds: overrides
            .seeds
            .clone()
            .or_else(|| file.train.seeds.clone())
            .unwrap_or_else(|| train_defaults.seeds.clone()),
    };
    train.validate().map_err(|e| ConfigError::Invalid {
        reason: e.to_string(),
    })?;

    let encoder = match file.encoder.kind.as_deref().unwrap_or("bag") {
        "bag" => EncoderChoice::Bag,
        other => match other.strip_prefix("precomputed:") {
            Some(path) if !path.trim().is_empty() => {
                EncoderChoice::Precomputed(resolve_path(&base_dir, path.trim()))
            }
            _ => {
                return Err(ConfigError::Invalid {
                    reason: format!(
                        "unknown encoder kind `{other}` (expected bag or precomputed:PATH)"
                    ),
                })
            }
        },
    };

    let parse_kind = |value: &str| {
        BackendKind::parse(value).map_err(|reason| ConfigError::Invalid { reason })
    };
    let mut extractor_kind = file.backends.extractor.as_deref().map(parse_kind).transpose()?;
    let mut reasoner_kind = file.backends.reasoner.as_deref().map(parse_kind).transpose()?;
    for (role, kind) in &overrides.backends {
        match role {
            BackendRole::Extractor => extractor_kind = Some(kind.clone()),
            BackendRole::Reasoner => reasoner_kind = Some(kind.clone()),
        }
    }

    Ok(ResolvedConfig {
        corpus_dir,
        out_dir,
        registry,
        cache_enabled,
        cache_dir,
        extraction,
        mu,
        ablation,
        train,
        encoder,
        extractor_kind,
        reasoner_kind,
        workers: overrides.workers.or(file.workers).unwrap_or(0),
        raw: overrides.raw || file.raw.unwrap_or(false),
        base_dir,
    })
}
