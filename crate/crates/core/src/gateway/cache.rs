//! Content-addressed response cache.
//!
//! Each cached response lives at `<dir>/<fingerprint>[.<index>].json` where
//! the fingerprint is the SHA-256 of the canonical request and `<index>` is
//! the sample index for multi-sample requests. Writes go through a tempfile
//! in the same directory followed by an atomic rename, so concurrent writers
//! of the same key can only ever race to identical content.

use std::fs;
use std::io::Write as _;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::GatewayError;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub(super) struct CachedResponse {
    pub response_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_logprobs: Option<Vec<f64>>,
    #[serde(default)]
    pub latency_ms: u64,
}

/// On-disk cache rooted at one endpoint's directory.
pub struct ResponseCache {
    dir: PathBuf,
}

impl ResponseCache {
    pub(super) fn new(dir: PathBuf) -> Self {
        ResponseCache { dir }
    }

    fn path_for(&self, fingerprint: &str, index: Option<u32>) -> PathBuf {
        match index {
            Some(k) => self.dir.join(format!("{fingerprint}.{k}.json")),
            None => self.dir.join(format!("{fingerprint}.json")),
        }
    }

    fn io_err(&self, err: impl std::fmt::Display) -> GatewayError {
        GatewayError::Cache {
            dir: self.dir.display().to_string(),
            message: err.to_string(),
        }
    }

    pub(super) fn get(
        &self,
        fingerprint: &str,
        index: Option<u32>,
    ) -> Result<Option<CachedResponse>, GatewayError> {
        let path = self.path_for(fingerprint, index);
        let bytes = match fs::read(&path) {
            Ok(bytes) => bytes,
            Err(err) if err.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(err) => return Err(self.io_err(err)),
        };
        let cached = serde_json::from_slice(&bytes)
            .map_err(|err| self.io_err(format!("corrupt entry {}: {err}", path.display())))?;
        Ok(Some(cached))
    }

    pub(super) fn put(
        &self,
        fingerprint: &str,
        index: Option<u32>,
        response: &CachedResponse,
    ) -> Result<(), GatewayError> {
        fs::create_dir_all(&self.dir).map_err(|e| self.io_err(e))?;
        let path = self.path_for(fingerprint, index);
        let mut tmp = tempfile::NamedTempFile::new_in(&self.dir).map_err(|e| self.io_err(e))?;
        let json = serde_json::to_vec_pretty(response).map_err(|e| self.io_err(e))?;
        tmp.write_all(&json).map_err(|e| self.io_err(e))?;
        tmp.persist(&path).map_err(|e| self.io_err(e))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> CachedResponse {
        CachedResponse {
            response_text: "Paris".to_string(),
            token_logprobs: Some(vec![-0.5, -1.0]),
            latency_ms: 12,
        }
    }

    #[test]
    fn round_trips_entries_by_fingerprint_and_index() {
        let dir = tempfile::tempdir().unwrap();
        let cache = ResponseCache::new(dir.path().join("ep"));
        assert!(cache.get("abc", None).unwrap().is_none());
        cache.put("abc", None, &sample()).unwrap();
        cache.put("abc", Some(3), &sample()).unwrap();
        let hit = cache.get("abc", None).unwrap().unwrap();
        assert_eq!(hit.response_text, "Paris");
        assert_eq!(hit.token_logprobs, Some(vec![-0.5, -1.0]));
        assert!(cache.get("abc", Some(3)).unwrap().is_some());
        assert!(cache.get("abc", Some(4)).unwrap().is_none());
        // Indexed and plain entries are distinct files.
        assert!(dir.path().join("ep/abc.json").exists());
        assert!(dir.path().join("ep/abc.3.json").exists());
    }

    #[test]
    fn corrupt_entry_reports_cache_error() {
        let dir = tempfile::tempdir().unwrap();
        let cache = ResponseCache::new(dir.path().join("ep"));
        fs::create_dir_all(dir.path().join("ep")).unwrap();
        fs::write(dir.path().join("ep/bad.json"), b"{not json").unwrap();
        let err = cache.get("bad", None).unwrap_err();
        assert!(matches!(err, GatewayError::Cache { .. }));
    }

    #[test]
    fn no_partial_files_remain_after_put() {
        let dir = tempfile::tempdir().unwrap();
        let cache = ResponseCache::new(dir.path().join("ep"));
        cache.put("k", None, &sample()).unwrap();
        let names: Vec<_> = fs::read_dir(dir.path().join("ep"))
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .collect();
        assert_eq!(names, vec!["k.json".to_string()]);
    }
}
