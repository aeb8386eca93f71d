//! Optional JSON-lines embedding cache.
//!
//! A cache file holds one record per object id for a single
//! (checkpoint hash, feature selection) pair; that pair names the file, so
//! stale features can never be served for a different model or selection.
//! The default cache root comes from the `COAD_CACHE_DIR` environment
//! variable.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{FeatureSelection, ObjectFeature};
use crate::error::{Error, Result};

/// Environment variable naming the default cache directory.
pub const CACHE_DIR_ENV: &str = "COAD_CACHE_DIR";

#[derive(Serialize, Deserialize)]
struct CacheRecord {
    id: String,
    vector: Vec<f64>,
}

/// In-memory view of one cache file.
pub struct EmbeddingCache {
    path: PathBuf,
    entries: BTreeMap<String, Vec<f64>>,
}

impl EmbeddingCache {
    /// Cache root from `COAD_CACHE_DIR`, if set and non-empty.
    pub fn dir_from_env() -> Option<PathBuf> {
        match std::env::var(CACHE_DIR_ENV) {
            Ok(v) if !v.is_empty() => Some(PathBuf::from(v)),
            _ => None,
        }
    }

    /// File name for a (checkpoint hash, selection) key.
    pub fn file_name(checkpoint_hash: &str, selection: FeatureSelection) -> String {
        format!("{checkpoint_hash}-{selection}.jsonl")
    }

    /// Opens (or starts) the cache for the given key under `dir`, loading
    /// any existing records.
    pub fn open(dir: impl AsRef<Path>, checkpoint_hash: &str, selection: FeatureSelection) -> Result<Self> {
        let path = dir.as_ref().join(Self::file_name(checkpoint_hash, selection));
        Self::open_path(path)
    }

    /// Opens a cache file directly by path.
    pub fn open_path(path: impl Into<PathBuf>) -> Result<Self> {
        let path = path.into();
        let mut entries = BTreeMap::new();
        if path.is_file() {
            let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            for (lineno, line) in text.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let record: CacheRecord = serde_json::from_str(line).map_err(|e| {
                    Error::data(format!(
                        "bad cache record at {}:{}: {e}",
                        path.display(),
                        lineno + 1
                    ))
                })?;
                if !record.vector.iter().all(|v| v.is_finite()) {
                    return Err(Error::data(format!(
                        "cache record {:?} at {} contains non-finite values",
                        record.id,
                        path.display()
                    )));
                }
                entries.insert(record.id, record.vector);
            }
        }
        Ok(Self { path, entries })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, id: &str) -> bool {
        self.entries.contains_key(id)
    }

    pub fn get(&self, id: &str) -> Option<ObjectFeature> {
        self.entries
            .get(id)
            .map(|v| ObjectFeature::new(id, v.clone()).expect("cached vectors are validated"))
    }

    pub fn insert(&mut self, feature: &ObjectFeature) {
        self.entries.insert(feature.id().to_string(), feature.vector().to_vec());
    }

    /// Writes all records, sorted by id, one JSON object per line.
    pub fn save(&self) -> Result<()> {
        if let Some(parent) = self.path.parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
        }
        let mut out = String::new();
        for (id, vector) in &self.entries {
            let record = CacheRecord { id: id.clone(), vector: vector.clone() };
            out.push_str(&serde_json::to_string(&record)?);
            out.push('\n');
        }
        let mut f = fs::File::create(&self.path).map_err(|e| Error::io(&self.path, e))?;
        f.write_all(out.as_bytes()).map_err(|e| Error::io(&self.path, e))?;
        Ok(())
    }
}

/// Features for labeled images, served from the cache where possible and
/// computed (and inserted) otherwise. Returns features in input order plus
/// the number of cache hits.
pub fn features_with_cache(
    cache: &mut EmbeddingCache,
    items: &[(String, crate::object_image::ObjectImage)],
    model: &crate::model::Model,
    selection: FeatureSelection,
) -> Result<(Vec<ObjectFeature>, usize)> {
    let mut features = Vec::with_capacity(items.len());
    let mut hits = 0;
    for (id, image) in items {
        if let Some(f) = cache.get(id) {
            hits += 1;
            features.push(f);
        } else {
            let f = super::feature_for(id.clone(), image, model, selection)?;
            cache.insert(&f);
            features.push(f);
        }
    }
    Ok((features, hits))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn feature(id: &str, v: &[f64]) -> ObjectFeature {
        ObjectFeature::new(id, v.to_vec()).unwrap()
    }

    #[test]
    fn roundtrip_and_ordering() {
        let dir = tempfile::tempdir().unwrap();
        let mut cache = EmbeddingCache::open(dir.path(), "abc123", FeatureSelection::Color).unwrap();
        cache.insert(&feature("zeta", &[1.0, 2.0]));
        cache.insert(&feature("alpha", &[3.0, 4.0]));
        cache.save().unwrap();

        let text = fs::read_to_string(cache.path()).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        assert!(lines[0].contains("alpha"), "records are sorted by id");

        let reloaded = EmbeddingCache::open(dir.path(), "abc123", FeatureSelection::Color).unwrap();
        assert_eq!(reloaded.len(), 2);
        assert_eq!(reloaded.get("zeta").unwrap().vector(), &[1.0, 2.0]);
        assert!(reloaded.get("missing").is_none());
    }

    #[test]
    fn key_separates_selections_and_checkpoints() {
        assert_ne!(
            EmbeddingCache::file_name("h1", FeatureSelection::Color),
            EmbeddingCache::file_name("h1", FeatureSelection::Both)
        );
        assert_ne!(
            EmbeddingCache::file_name("h1", FeatureSelection::Color),
            EmbeddingCache::file_name("h2", FeatureSelection::Color)
        );
    }

    #[test]
    fn corrupt_records_are_reported_with_location() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x-color.jsonl");
        fs::write(&path, "{\"id\":\"a\",\"vector\":[1.0]}\nnot json\n").unwrap();
        let err = EmbeddingCache::open_path(&path).err().expect("corrupt cache must fail");
        assert!(err.to_string().contains(":2"), "{err}");
    }

    #[test]
    fn env_dir_respected() {
        // Must not read the real environment non-hermetically: set and
        // restore around the assertion.
        let key = CACHE_DIR_ENV;
        let old = std::env::var(key).ok();
        std::env::set_var(key, "/tmp/some-cache");
        assert_eq!(EmbeddingCache::dir_from_env(), Some(PathBuf::from("/tmp/some-cache")));
        std::env::set_var(key, "");
        assert_eq!(EmbeddingCache::dir_from_env(), None);
        match old {
            Some(v) => std::env::set_var(key, v),
            None => std::env::remove_var(key),
        }
    }
}
