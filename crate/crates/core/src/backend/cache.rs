use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use tracing::warn;

use super::{BackendError, BackendIdentity, ChatRequest, LlmBackend, Passage, SearchBackend};
use crate::io::{hash_fields, write_atomic};

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Entry {
    key: String,
    kind: String,
    backend: BackendIdentity,
    created_at: u64,
    payload: Value,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheStats {
    pub hits: u64,
    pub misses: u64,
    pub corrupt: u64,
}

/// Content-addressed response store on disk, one JSON file per entry.
///
/// Concurrent lookups of the same key are serialized so that only the first
/// caller reaches the backend; the rest observe a hit. Hit and miss counts
/// are therefore independent of thread scheduling.
#[derive(Debug)]
pub struct Cache {
    dir: PathBuf,
    hits: AtomicU64,
    misses: AtomicU64,
    corrupt: AtomicU64,
    inflight: Mutex<HashMap<String, Arc<Mutex<()>>>>,
}

impl Cache {
    pub fn open(dir: impl Into<PathBuf>) -> std::io::Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir)?;
        Ok(Self {
            dir,
            hits: AtomicU64::new(0),
            misses: AtomicU64::new(0),
            corrupt: AtomicU64::new(0),
            inflight: Mutex::new(HashMap::new()),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn key(kind: &str, backend: &BackendIdentity, request: &str) -> String {
        hash_fields([kind, backend.provider.as_str(), backend.model.as_str(), request])
    }

    fn path_for(&self, key: &str) -> PathBuf {
        self.dir.join(&key[..2]).join(format!("{key}.json"))
    }

    /// Returns the stored payload, or `None` on a miss. Unreadable entries
    /// are logged and treated as misses.
    pub fn get(&self, key: &str) -> Option<Value> {
        let path = self.path_for(key);
        let bytes = std::fs::read(&path).ok()?;
        match serde_json::from_slice::<Entry>(&bytes) {
            Ok(entry) if entry.key == key => Some(entry.payload),
            Ok(_) | Err(_) => {
                warn!(path = %path.display(), "ignoring corrupt cache entry");
                self.corrupt.fetch_add(1, Ordering::Relaxed);
                None
            }
        }
    }

    pub fn put(&self, key: &str, kind: &str, backend: &BackendIdentity, payload: &Value) -> std::io::Result<()> {
        let entry = Entry {
            key: key.to_string(),
            kind: kind.to_string(),
            backend: backend.clone(),
            created_at: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
            payload: payload.clone(),
        };
        let bytes = serde_json::to_vec(&entry).expect("cache entry serializes");
        write_atomic(&self.path_for(key), &bytes)
    }

    /// Looks `key` up and on a miss runs `fetch`, storing its result.
    pub fn get_or_fetch(
        &self,
        key: &str,
        kind: &str,
        backend: &BackendIdentity,
        fetch: impl FnOnce() -> Result<Value, BackendError>,
    ) -> Result<Value, BackendError> {
        let lock = self.inflight.lock().unwrap().entry(key.to_string()).or_default().clone();
        let _guard = lock.lock().unwrap();
        if let Some(v) = self.get(key) {
            self.hits.fetch_add(1, Ordering::Relaxed);
            return Ok(v);
        }
        self.misses.fetch_add(1, Ordering::Relaxed);
        let value = fetch()?;
        if let Err(e) = self.put(key, kind, backend, &value) {
            warn!(error = %e, "failed to write cache entry");
        }
        Ok(value)
    }

    pub fn stats(&self) -> CacheStats {
        CacheStats {
            hits: self.hits.load(Ordering::Relaxed),
            misses: self.misses.load(Ordering::Relaxed),
            corrupt: self.corrupt.load(Ordering::Relaxed),
        }
    }

    /// Number of entries and total bytes currently on disk.
    pub fn disk_usage(&self) -> std::io::Result<(u64, u64)> {
        let (mut n, mut bytes) = (0, 0);
        for shard in std::fs::read_dir(&self.dir)? {
            let shard = shard?;
            if !shard.file_type()?.is_dir() {
                continue;
            }
            for f in std::fs::read_dir(shard.path())? {
                let f = f?;
                if f.path().extension().is_some_and(|e| e == "json") {
                    n += 1;
                    bytes += f.metadata()?.len();
                }
            }
        }
        Ok((n, bytes))
    }

    /// Deletes every entry. Returns how many were removed.
    pub fn clear(&self) -> std::io::Result<u64> {
        let (n, _) = self.disk_usage()?;
        for shard in std::fs::read_dir(&self.dir)? {
            let shard = shard?;
            if shard.file_type()?.is_dir() {
                std::fs::remove_dir_all(shard.path())?;
            }
        }
        Ok(n)
    }
}

pub struct CachedLlm<L> {
    inner: L,
    cache: Arc<Cache>,
}

impl<L: LlmBackend> CachedLlm<L> {
    pub fn new(inner: L, cache: Arc<Cache>) -> Self {
        Self { inner, cache }
    }
}

impl<L: LlmBackend> LlmBackend for CachedLlm<L> {
    fn identity(&self) -> BackendIdentity {
        self.inner.identity()
    }

    fn complete(&self, req: &ChatRequest) -> Result<String, BackendError> {
        let id = self.inner.identity();
        let key = Cache::key("llm", &id, &req.content_hash());
        let v = self.cache.get_or_fetch(&key, "llm", &id, || self.inner.complete(req).map(Value::String))?;
        v.as_str()
            .map(str::to_string)
            .ok_or_else(|| BackendError::Decode("cached llm payload is not a string".into()))
    }
}

pub struct CachedSearch<S> {
    inner: S,
    cache: Arc<Cache>,
}

impl<S: SearchBackend> CachedSearch<S> {
    pub fn new(inner: S, cache: Arc<Cache>) -> Self {
        Self { inner, cache }
    }
}

impl<S: SearchBackend> SearchBackend for CachedSearch<S> {
    fn identity(&self) -> BackendIdentity {
        self.inner.identity()
    }

    fn search(&self, query: &str) -> Result<Vec<Passage>, BackendError> {
        let id = self.inner.identity();
        let key = Cache::key("search", &id, query);
        let v = self.cache.get_or_fetch(&key, "search", &id, || {
            let passages = self.inner.search(query)?;
            Ok(serde_json::to_value(passages).expect("passages serialize"))
        })?;
        serde_json::from_value(v).map_err(|e| BackendError::Decode(format!("cached search payload: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{MockLlm, MockSearch};

    #[test]
    fn second_query_hits_cache() {
        let dir = tempfile::tempdir().unwrap();
        let cache = Arc::new(Cache::open(dir.path()).unwrap());
        let mock = Arc::new(MockSearch::new().with("q", vec![Passage::new("s", "t")]));
        let cached = CachedSearch::new(mock.clone(), cache.clone());
        assert_eq!(cached.search("q").unwrap(), cached.search("q").unwrap());
        assert_eq!(mock.calls(), 1);
        assert_eq!(cache.stats(), CacheStats { hits: 1, misses: 1, corrupt: 0 });

        assert_eq!(cache.clear().unwrap(), 1);
        cached.search("q").unwrap();
        assert_eq!(mock.calls(), 2);
    }

    #[test]
    fn corrupt_entry_is_refetched() {
        let dir = tempfile::tempdir().unwrap();
        let cache = Arc::new(Cache::open(dir.path()).unwrap());
        let req = ChatRequest::new("s", "u");
        let mock = Arc::new(MockLlm::new().with(&req, "resp"));
        let cached = CachedLlm::new(mock.clone(), cache.clone());
        cached.complete(&req).unwrap();
        let key = Cache::key("llm", &mock.identity(), &req.content_hash());
        std::fs::write(cache.path_for(&key), b"{garbage").unwrap();
        assert_eq!(cached.complete(&req).unwrap(), "resp");
        assert_eq!(mock.calls(), 2);
        assert_eq!(cache.stats().corrupt, 1);
        assert_eq!(cache.disk_usage().unwrap().0, 1);
    }

    #[test]
    fn concurrent_identical_requests_fetch_once() {
        let dir = tempfile::tempdir().unwrap();
        let cache = Arc::new(Cache::open(dir.path()).unwrap());
        let req = ChatRequest::new("s", "u");
        let mock = Arc::new(MockLlm::new().with(&req, "resp"));
        let cached = Arc::new(CachedLlm::new(mock.clone(), cache.clone()));
        std::thread::scope(|s| {
            for _ in 0..8 {
                let c = cached.clone();
                let r = req.clone();
                s.spawn(move || c.complete(&r).unwrap());
            }
        });
        assert_eq!(mock.calls(), 1);
        assert_eq!(cache.stats(), CacheStats { hits: 7, misses: 1, corrupt: 0 });
    }
}
