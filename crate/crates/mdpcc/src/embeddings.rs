//! Precomputed text embeddings: a JSONL table mapping article text (by
//! content digest) to a fixed-width vector, exported once by an external
//! encoder and loaded here as a frozen [`TextEncoder`]. This is how a
//! transformer encoder plugs into the detector without linking any ML
//! runtime into this binary.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use mdpcc_core::detector::{EncodeError, SparseFeatures, TextEncoder};
use serde::{Deserialize, Serialize};

use crate::cache::sha256_hex;

/// First line of an embedding file: table-wide properties.
#[derive(Debug, Serialize, Deserialize)]
struct EmbeddingMeta {
    #[serde(default = "default_encoder_id")]
    encoder_id: String,
    width: usize,
    /// Whether the detector's per-feature scale should train. Precomputed
    /// vectors are frozen features, so this defaults to off.
    #[serde(default)]
    trainable_scale: bool,
}

fn default_encoder_id() -> String {
    "precomputed".to_string()
}

/// One embedding row: the digest of the exact article text and its vector.
#[derive(Debug, Serialize, Deserialize)]
struct EmbeddingRow {
    sha256: String,
    vector: Vec<f64>,
}

#[derive(Debug, thiserror::Error)]
pub enum EmbeddingError {
    #[error("cannot read embedding file {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path} line {line}: {message}")]
    Line {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{path} line {line}: vector has {got} dimensions, table width is {want}")]
    WidthMismatch {
        path: PathBuf,
        line: usize,
        got: usize,
        want: usize,
    },
    #[error("{path} line {line}: duplicate entry for digest {digest}")]
    Duplicate {
        path: PathBuf,
        line: usize,
        digest: String,
    },
    #[error("{path} is empty: expected a meta line followed by embedding rows")]
    Empty { path: PathBuf },
}

/// Embedding lookup table implementing [`TextEncoder`]. Texts are keyed by
/// their SHA-256 digest, so the table file never has to embed (or escape)
/// article bodies. Zero components are dropped at load time.
pub struct PrecomputedEncoder {
    id: String,
    width: usize,
    trainable_scale: bool,
    table: HashMap<String, SparseFeatures>,
}

impl PrecomputedEncoder {
    pub fn load(path: &Path) -> Result<Self, EmbeddingError> {
        let content = fs::read_to_string(path).map_err(|source| EmbeddingError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let line_err = |line: usize, message: String| EmbeddingError::Line {
            path: path.to_path_buf(),
            line,
            message,
        };

        let mut lines = content
            .lines()
            .enumerate()
            .map(|(idx, raw)| (idx + 1, raw.trim()))
            .filter(|(_, raw)| !raw.is_empty());
        let (meta_line, meta_raw) = lines.next().ok_or_else(|| EmbeddingError::Empty {
            path: path.to_path_buf(),
        })?;
        let meta: EmbeddingMeta =
            serde_json::from_str(meta_raw).map_err(|e| line_err(meta_line, e.to_string()))?;
        if meta.width == 0 {
            return Err(line_err(meta_line, "width must be at least 1".into()));
        }

        let mut table = HashMap::new();
        for (line, raw) in lines {
            let row: EmbeddingRow =
                serde_json::from_str(raw).map_err(|e| line_err(line, e.to_string()))?;
            if row.vector.len() != meta.width {
                return Err(EmbeddingError::WidthMismatch {
                    path: path.to_path_buf(),
                    line,
                    got: row.vector.len(),
                    want: meta.width,
                });
            }
            let features: SparseFeatures = row
                .vector
                .iter()
                .enumerate()
                .filter(|(_, v)| **v != 0.0)
                .map(|(i, v)| (i, *v))
                .collect();
            if table.insert(row.sha256.clone(), features).is_some() {
                return Err(EmbeddingError::Duplicate {
                    path: path.to_path_buf(),
                    line,
                    digest: row.sha256,
                });
            }
        }

        Ok(Self {
            id: meta.encoder_id,
            width: meta.width,
            trainable_scale: meta.trainable_scale,
            table,
        })
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }
}

impl TextEncoder for PrecomputedEncoder {
    fn id(&self) -> &str {
        &self.id
    }

    fn width(&self) -> usize {
        self.width
    }

    fn trainable_scale(&self) -> bool {
        self.trainable_scale
    }

    fn encode(&self, text: &str) -> Result<SparseFeatures, EncodeError> {
        let digest = sha256_hex(&[text.as_bytes()]);
        self.table.get(&digest).cloned().ok_or_else(|| {
            let preview: String = text.chars().take(40).collect();
            EncodeError {
                reason: format!("no embedding for text starting `{preview}`"),
            }
        })
    }
}

/// Writes an embedding table in the format [`PrecomputedEncoder::load`]
/// reads: meta line, then one row per text. Used by tests and by export
/// tooling; the digests are computed here from the exact text bytes.
pub fn write_embeddings(
    path: &Path,
    encoder_id: &str,
    width: usize,
    trainable_scale: bool,
    entries: &[(&str, Vec<f64>)],
) -> std::io::Result<()> {
    let mut out = String::new();
    let meta = EmbeddingMeta {
        encoder_id: encoder_id.to_string(),
        width,
        trainable_scale,
    };
    out.push_str(&serde_json::to_string(&meta).expect("meta serializes"));
    out.push('\n');
    for (text, vector) in entries {
        let row = EmbeddingRow {
            sha256: sha256_hex(&[text.as_bytes()]),
            vector: vector.clone(),
        };
        out.push_str(&serde_json::to_string(&row).expect("row serializes"));
        out.push('\n');
    }
    fs::write(path, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_table(dir: &Path) -> PathBuf {
        let path = dir.join("emb.jsonl");
        write_embeddings(
            &path,
            "test-encoder",
            4,
            false,
            &[
                ("the gadget is made of plastic", vec![1.0, 0.0, 0.5, 0.0]),
                ("the drink is made of water", vec![0.0, 2.0, 0.0, 0.0]),
            ],
        )
        .unwrap();
        path
    }

    #[test]
    fn loads_and_encodes_known_texts() {
        let dir = tempfile::tempdir().unwrap();
        let encoder = PrecomputedEncoder::load(&sample_table(dir.path())).unwrap();
        assert_eq!(encoder.id(), "test-encoder");
        assert_eq!(encoder.width(), 4);
        assert!(!encoder.trainable_scale());
        assert_eq!(encoder.len(), 2);

        let features = encoder.encode("the gadget is made of plastic").unwrap();
        assert_eq!(features, vec![(0, 1.0), (2, 0.5)]);
    }

    #[test]
    fn unknown_text_is_an_encode_error() {
        let dir = tempfile::tempdir().unwrap();
        let encoder = PrecomputedEncoder::load(&sample_table(dir.path())).unwrap();
        let err = encoder.encode("never embedded").unwrap_err();
        assert!(err.reason.contains("never embedded"), "{}", err.reason);
    }

    #[test]
    fn width_mismatch_is_rejected_with_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.jsonl");
        fs::write(
            &path,
            "{\"width\":3}\n{\"sha256\":\"aa\",\"vector\":[1.0,2.0]}\n",
        )
        .unwrap();
        match PrecomputedEncoder::load(&path) {
            Err(EmbeddingError::WidthMismatch { line, got, want, .. }) => {
                assert_eq!((line, got, want), (2, 2, 3));
            }
            other => panic!("expected WidthMismatch, got {:?}", other.err()),
        }
    }

    #[test]
    fn duplicates_and_empty_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.jsonl");
        fs::write(
            &path,
            "{\"width\":1}\n{\"sha256\":\"aa\",\"vector\":[1.0]}\n{\"sha256\":\"aa\",\"vector\":[2.0]}\n",
        )
        .unwrap();
        assert!(matches!(
            PrecomputedEncoder::load(&path),
            Err(EmbeddingError::Duplicate { line: 3, .. })
        ));

        fs::write(&path, "").unwrap();
        assert!(matches!(
            PrecomputedEncoder::load(&path),
            Err(EmbeddingError::Empty { .. })
        ));
    }

    #[test]
    fn frozen_table_trains_a_detector() {
        use mdpcc_core::corpus::Veracity;
        use mdpcc_core::detector::{encode_split, train, TrainConfig};

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.jsonl");
        // Linearly separable on dimension 0.
        let entries: Vec<(String, Vec<f64>, Veracity)> = (0..24)
            .map(|i| {
                let fake = i % 2 == 0;
                let text = format!("article number {i}");
                let vector = vec![if fake { 1.0 } else { -1.0 }, 0.25];
                let label = if fake { Veracity::Fake } else { Veracity::Real };
                (text, vector, label)
            })
            .collect();
        let rows: Vec<(&str, Vec<f64>)> = entries
            .iter()
            .map(|(t, v, _)| (t.as_str(), v.clone()))
            .collect();
        write_embeddings(&path, "tiny", 2, false, &rows).unwrap();
        let encoder = PrecomputedEncoder::load(&path).unwrap();

        let labeled: Vec<(&str, Veracity)> =
            entries.iter().map(|(t, _, l)| (t.as_str(), *l)).collect();
        let examples = encode_split(&encoder, labeled.iter().cloned()).unwrap();
        let config = TrainConfig {
            head_lr: 0.5,
            max_epochs: 20,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let outcome = train(&encoder, &examples, &examples, &config, 1).unwrap();
        assert!(outcome.best_metric > 95.0, "macro F1 {}", outcome.best_metric);
        assert!(
            outcome.model.scale.iter().all(|&s| s == 1.0),
            "frozen scale must not move"
        );
    }
}
