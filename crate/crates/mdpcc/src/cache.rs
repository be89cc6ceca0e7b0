//! Content-addressed disk cache with two planes: raw backend generations
//! (`gen/`, keyed by backend id + wire request, so they survive
//! hyperparameter changes that don't alter the request) and per-article
//! pipeline records (`rec/`, keyed by the pipeline config hash + article, so
//! any config change invalidates them).
//!
//! Entries are JSON files named by their SHA-256 key. Writes go to a
//! temporary file in the same directory and are renamed into place, so a
//! reader never observes a partial entry. Unreadable or unparseable entries
//! are treated as misses and evicted.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

/// Hex SHA-256 of the concatenated parts.
pub fn sha256_hex<P: AsRef<[u8]>>(parts: &[P]) -> String {
    let mut hasher = Sha256::new();
    for part in parts {
        hasher.update(part.as_ref());
    }
    let digest = hasher.finalize();
    let mut hex = String::with_capacity(64);
    for byte in digest {
        let _ = write!(hex, "{byte:02x}");
    }
    hex
}

/// Which store an entry belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CachePlane {
    /// Raw backend generations, reusable across pipeline-config changes.
    Generation,
    /// Finished per-article augmentation records, config-hash scoped.
    Record,
}

impl CachePlane {
    fn dir(self) -> &'static str {
        match self {
            CachePlane::Generation => "gen",
            CachePlane::Record => "rec",
        }
    }
}

static TEMP_COUNTER: AtomicU64 = AtomicU64::new(0);

#[derive(Debug)]
pub struct DiskCache {
    root: PathBuf,
}

impl DiskCache {
    /// Opens (creating if needed) a cache rooted at `root`.
    pub fn open(root: impl Into<PathBuf>) -> io::Result<Self> {
        let root = root.into();
        for plane in [CachePlane::Generation, CachePlane::Record] {
            fs::create_dir_all(root.join(plane.dir()))?;
        }
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn entry_path(&self, plane: CachePlane, key: &str) -> PathBuf {
        self.root.join(plane.dir()).join(format!("{key}.json"))
    }

    /// Looks up and deserializes an entry. Corrupt entries are evicted and
    /// reported as a miss.
    pub fn get_json<T: DeserializeOwned>(&self, plane: CachePlane, key: &str) -> Option<T> {
        let path = self.entry_path(plane, key);
        let bytes = fs::read(&path).ok()?;
        match serde_json::from_slice(&bytes) {
            Ok(value) => Some(value),
            Err(_) => {
                let _ = fs::remove_file(&path);
                None
            }
        }
    }

    /// Serializes and stores an entry atomically (write temp, then rename).
    pub fn put_json<T: Serialize>(&self, plane: CachePlane, key: &str, value: &T) -> io::Result<()> {
        let path = self.entry_path(plane, key);
        let bytes = serde_json::to_vec(value)
            .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?;
        let temp = path.with_extension(format!(
            "tmp.{}.{}",
            std::process::id(),
            TEMP_COUNTER.fetch_add(1, Ordering::Relaxed)
        ));
        fs::write(&temp, &bytes)?;
        match fs::rename(&temp, &path) {
            Ok(()) => Ok(()),
            Err(e) => {
                let _ = fs::remove_file(&temp);
                Err(e)
            }
        }
    }

    pub fn evict(&self, plane: CachePlane, key: &str) {
        let _ = fs::remove_file(self.entry_path(plane, key));
    }
}
