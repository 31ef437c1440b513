//! Deterministic call cache shared by LM and RM backends.
//!
//! Responses are keyed by a content hash of (backend id, request kind,
//! canonicalized payload, sampling params, seed). The cache is append-only:
//! writing different bytes under an existing key is an error, which turns
//! nondeterministic backends into loud failures instead of silent drift.
//!
//! On disk, each entry is a `<hex key>.json` file holding the key fields and
//! the response, so cache directories can be diffed and replayed.

use std::collections::HashMap;
use std::fs;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{DspError, Result};

/// The fields hashed into a cache key.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CacheKeyFields {
    /// Stable backend identifier, e.g. `lm:mock:<script>` or `rm:remote:<url>`.
    pub backend_id: String,
    /// Request kind: `generate`, `score`, `retrieve`.
    pub kind: String,
    /// Canonical JSON of the request payload (fields sorted by name).
    pub payload: String,
    /// Canonical JSON of the sampling or retrieval parameters.
    pub params: String,
    /// Explicit replay seed.
    pub seed: u64,
}

impl CacheKeyFields {
    /// The content hash used as the entry key (and on-disk file stem).
    pub fn key(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.backend_id.as_bytes());
        hasher.update([0]);
        hasher.update(self.kind.as_bytes());
        hasher.update([0]);
        hasher.update(self.payload.as_bytes());
        hasher.update([0]);
        hasher.update(self.params.as_bytes());
        hasher.update([0]);
        hasher.update(self.seed.to_le_bytes());
        hex(&hasher.finalize())
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Hex SHA-256 of a prompt, used in traces and transport errors.
pub fn prompt_hash(prompt: &str) -> String {
    hex(&Sha256::digest(prompt.as_bytes()))
}

#[derive(Serialize, Deserialize)]
struct DiskEntry {
    key: CacheKeyFields,
    response: String,
}

enum Store {
    Memory(Mutex<HashMap<String, String>>),
    Disk(PathBuf),
}

/// A get-or-compute cache with per-key single flight.
pub struct Cache {
    store: Store,
    inflight: Mutex<HashMap<String, Arc<Mutex<()>>>>,
}

impl Cache {
    /// An in-memory cache (tests, one-shot runs without a cache dir).
    pub fn memory() -> Self {
        Cache {
            store: Store::Memory(Mutex::new(HashMap::new())),
            inflight: Mutex::new(HashMap::new()),
        }
    }

    /// A directory-backed cache; the directory is created if missing.
    pub fn disk(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)
            .map_err(|e| DspError::Cache(format!("create {}: {e}", dir.display())))?;
        Ok(Cache {
            store: Store::Disk(dir),
            inflight: Mutex::new(HashMap::new()),
        })
    }

    fn read(&self, key: &str) -> Result<Option<String>> {
        match &self.store {
            Store::Memory(map) => Ok(map.lock().unwrap().get(key).cloned()),
            Store::Disk(dir) => {
                let path = dir.join(format!("{key}.json"));
                match fs::read_to_string(&path) {
                    Ok(raw) => {
                        let entry: DiskEntry = serde_json::from_str(&raw).map_err(|e| {
                            DspError::Cache(format!("corrupt entry {}: {e}", path.display()))
                        })?;
                        Ok(Some(entry.response))
                    }
                    Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
                    Err(e) => Err(DspError::Cache(format!("read {}: {e}", path.display()))),
                }
            }
        }
    }

    fn write(&self, fields: &CacheKeyFields, key: &str, response: &str) -> Result<()> {
        match &self.store {
            Store::Memory(map) => {
                map.lock()
                    .unwrap()
                    .insert(key.to_string(), response.to_string());
                Ok(())
            }
            Store::Disk(dir) => {
                let path = dir.join(format!("{key}.json"));
                let entry = DiskEntry {
                    key: fields.clone(),
                    response: response.to_string(),
                };
                let body = serde_json::to_string_pretty(&entry)
                    .map_err(|e| DspError::Cache(format!("serialize entry: {e}")))?;
                let tmp = dir.join(format!("{key}.json.tmp"));
                fs::write(&tmp, &body)
                    .map_err(|e| DspError::Cache(format!("write {}: {e}", tmp.display())))?;
                fs::rename(&tmp, &path)
                    .map_err(|e| DspError::Cache(format!("rename {}: {e}", path.display())))?;
                Ok(())
            }
        }
    }

    /// Returns the cached response for the key fields, computing and storing
    /// it on a miss. Compute errors are not cached; a subsequent call retries.
    /// Concurrent calls for the same key run the compute at most once.
    pub fn get_or_compute(
        &self,
        fields: &CacheKeyFields,
        compute: impl FnOnce() -> Result<String>,
    ) -> Result<String> {
        let key = fields.key();
        if let Some(found) = self.read(&key)? {
            return Ok(found);
        }

        let gate = {
            let mut inflight = self.inflight.lock().unwrap();
            inflight
                .entry(key.clone())
                .or_insert_with(|| Arc::new(Mutex::new(())))
                .clone()
        };
        let _guard = gate.lock().unwrap();

        // Another caller may have computed while we waited on the gate.
        if let Some(found) = self.read(&key)? {
            return Ok(found);
        }

        let result = compute();
        if let Ok(response) = &result {
            // Append-only check: a pre-existing entry with different bytes
            // means the backend is not deterministic for this key.
            if let Some(existing) = self.read(&key)? {
                if existing != *response {
                    return Err(DspError::Cache(format!(
                        "conflicting write for key {key}: cached bytes differ from new response"
                    )));
                }
            } else {
                self.write(fields, &key, response)?;
            }
        }

        let mut inflight = self.inflight.lock().unwrap();
        if let Some(gate) = inflight.get(&key) {
            if Arc::strong_count(gate) <= 2 {
                inflight.remove(&key);
            }
        }
        drop(inflight);

        result
    }
}

impl std::fmt::Debug for Cache {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match &self.store {
            Store::Memory(_) => write!(f, "Cache::Memory"),
            Store::Disk(dir) => write!(f, "Cache::Disk({})", dir.display()),
        }
    }
}

/// Canonical JSON for cache payloads: object keys sorted, numbers in
/// shortest round-trip form. `serde_json` maps are ordered, so serializing
/// a `Value` built from sorted inputs is already canonical.
pub fn canonical_json(value: &serde_json::Value) -> String {
    value.to_string()
}
