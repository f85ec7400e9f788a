//! Content-addressed response cache.
//!
//! One response per file under the cache directory, named by the SHA-256
//! digest of the canonicalized request. Each file stores the request
//! alongside the response so entries are self-describing and collisions are
//! detectable. Writers stage to a temp file and rename into place, which
//! gives concurrent readers and single-writer-per-key semantics on any
//! POSIX filesystem.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{BackendError, BackendRequest, BackendResponse};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub request: BackendRequest,
    pub response: BackendResponse,
    /// Unix seconds at store time; informational only.
    pub created_at: u64,
}

#[derive(Debug, Clone)]
pub struct ResponseCache {
    dir: PathBuf,
}

impl ResponseCache {
    pub fn open(dir: impl Into<PathBuf>) -> std::io::Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(ResponseCache { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Hex digest of the canonical request serialization. Injective over
    /// requests up to digest collision; collisions are caught at read time
    /// by comparing the stored request.
    pub fn key_for(request: &BackendRequest) -> String {
        let canonical = serde_json::to_vec(request).expect("request serializes");
        hex::encode(Sha256::digest(&canonical))
    }

    fn path_for(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.json"))
    }

    pub fn get(&self, request: &BackendRequest) -> Result<Option<BackendResponse>, BackendError> {
        let path = self.path_for(&Self::key_for(request));
        let bytes = match fs::read(&path) {
            Ok(bytes) => bytes,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(BackendError::Cache(e)),
        };
        let entry: CacheEntry = serde_json::from_slice(&bytes).map_err(|e| {
            BackendError::Protocol {
                message: format!("corrupt cache entry {}: {e}", path.display()),
                payload: String::from_utf8_lossy(&bytes).into_owned(),
            }
        })?;
        if &entry.request != request {
            // Digest collision or tampering; treat as a miss.
            return Ok(None);
        }
        Ok(Some(entry.response))
    }

    pub fn put(
        &self,
        request: &BackendRequest,
        response: &BackendResponse,
    ) -> Result<(), BackendError> {
        let entry = CacheEntry {
            request: request.clone(),
            response: response.clone(),
            created_at: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
        };
        let key = Self::key_for(request);
        let final_path = self.path_for(&key);
        let tmp_path = self.dir.join(format!(".{key}.{}.tmp", std::process::id()));
        let bytes = serde_json::to_vec_pretty(&entry).expect("entry serializes");
        fs::write(&tmp_path, bytes).map_err(BackendError::Cache)?;
        fs::rename(&tmp_path, &final_path).map_err(BackendError::Cache)?;
        Ok(())
    }
}
