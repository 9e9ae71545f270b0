//! Persistent embedding cache.
//!
//! Layout under the cache directory:
//!
//! ```text
//! manifest.json          {"format_version":1,"providers":{id:{"file","dimension"}}}
//! <provider-file>.bin    repeated records: sha256(text) [32 bytes] ++ D x f32 (LE)
//! ```
//!
//! Records are only ever appended. A torn trailing record (crash mid-append)
//! is ignored on load.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::EmbedError;

const FORMAT_VERSION: u32 = 1;
const KEY_LEN: usize = 32;

#[derive(Debug, Default, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    providers: BTreeMap<String, ProviderEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ProviderEntry {
    file: String,
    dimension: usize,
}

type Key = [u8; KEY_LEN];

#[derive(Default)]
struct ProviderShard {
    entries: HashMap<Key, Vec<f32>>,
}

pub struct EmbeddingCache {
    dir: PathBuf,
    shards: RwLock<HashMap<String, ProviderShard>>,
    // Serializes appends and manifest updates.
    writer: Mutex<HashMap<String, File>>,
}

impl std::fmt::Debug for EmbeddingCache {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EmbeddingCache").field("dir", &self.dir).finish()
    }
}

impl EmbeddingCache {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, EmbedError> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|source| io_err(&dir, source))?;
        let cache = Self {
            dir,
            shards: RwLock::new(HashMap::new()),
            writer: Mutex::new(HashMap::new()),
        };
        let manifest = cache.read_manifest()?;
        let mut shards = cache.shards.write().expect("cache lock poisoned");
        for (provider, entry) in &manifest.providers {
            let shard = load_shard(&cache.dir.join(&entry.file), entry.dimension)?;
            shards.insert(provider.clone(), shard);
        }
        drop(shards);
        Ok(cache)
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn len(&self, provider_id: &str) -> usize {
        self.shards
            .read()
            .expect("cache lock poisoned")
            .get(provider_id)
            .map_or(0, |s| s.entries.len())
    }

    pub fn get(&self, provider_id: &str, text: &str) -> Option<Vec<f32>> {
        let key = text_key(text);
        self.shards
            .read()
            .expect("cache lock poisoned")
            .get(provider_id)
            .and_then(|s| s.entries.get(&key).cloned())
    }

    pub fn put(&self, provider_id: &str, text: &str, vector: &[f32]) -> Result<(), EmbedError> {
        let key = text_key(text);
        let mut writers = self.writer.lock().expect("cache writer poisoned");
        {
            let shards = self.shards.read().expect("cache lock poisoned");
            if shards.get(provider_id).is_some_and(|s| s.entries.contains_key(&key)) {
                return Ok(());
            }
        }
        if !writers.contains_key(provider_id) {
            let file_name = self.register_provider(provider_id, vector.len())?;
            let path = self.dir.join(file_name);
            let file = OpenOptions::new()
                .create(true)
                .append(true)
                .open(&path)
                .map_err(|source| io_err(&path, source))?;
            // Drop any torn tail so new records stay aligned.
            let record = (KEY_LEN + vector.len() * 4) as u64;
            let len = file.metadata().map_err(|source| io_err(&path, source))?.len();
            if len % record != 0 {
                file.set_len(len - len % record)
                    .map_err(|source| io_err(&path, source))?;
            }
            writers.insert(provider_id.to_string(), file);
        }
        let file = writers.get_mut(provider_id).expect("just inserted");
        let mut record = Vec::with_capacity(KEY_LEN + vector.len() * 4);
        record.extend_from_slice(&key);
        for v in vector {
            record.extend_from_slice(&v.to_le_bytes());
        }
        file.write_all(&record).map_err(|source| io_err(&self.dir, source))?;
        self.shards
            .write()
            .expect("cache lock poisoned")
            .entry(provider_id.to_string())
            .or_default()
            .entries
            .insert(key, vector.to_vec());
        Ok(())
    }

    fn manifest_path(&self) -> PathBuf {
        self.dir.join("manifest.json")
    }

    fn read_manifest(&self) -> Result<Manifest, EmbedError> {
        let path = self.manifest_path();
        match fs::read(&path) {
            Ok(bytes) => serde_json::from_slice(&bytes).map_err(|e| {
                io_err(&path, std::io::Error::new(std::io::ErrorKind::InvalidData, e))
            }),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Manifest {
                format_version: FORMAT_VERSION,
                ..Default::default()
            }),
            Err(source) => Err(io_err(&path, source)),
        }
    }

    /// Returns the shard file name, adding the provider to the manifest if new.
    fn register_provider(&self, provider_id: &str, dimension: usize) -> Result<String, EmbedError> {
        let mut manifest = self.read_manifest()?;
        if let Some(entry) = manifest.providers.get(provider_id) {
            return Ok(entry.file.clone());
        }
        let digest = hex::encode(&Sha256::digest(provider_id.as_bytes())[..6]);
        let stem: String = provider_id
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' })
            .collect();
        let file = format!("{stem}-{digest}.bin");
        manifest.providers.insert(
            provider_id.to_string(),
            ProviderEntry {
                file: file.clone(),
                dimension,
            },
        );
        manifest.format_version = FORMAT_VERSION;
        let path = self.manifest_path();
        let body = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
        crate::fsutil::write_atomic(&path, &body).map_err(|source| io_err(&path, source))?;
        Ok(file)
    }
}

fn text_key(text: &str) -> Key {
    Sha256::digest(text.as_bytes()).into()
}

fn load_shard(path: &Path, dimension: usize) -> Result<ProviderShard, EmbedError> {
    let bytes = match fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(ProviderShard::default()),
        Err(source) => return Err(io_err(path, source)),
    };
    let record = KEY_LEN + dimension * 4;
    let mut shard = ProviderShard::default();
    for rec in bytes.chunks_exact(record) {
        let key: Key = rec[..KEY_LEN].try_into().expect("sized slice");
        let values = rec[KEY_LEN..]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        shard.entries.insert(key, values);
    }
    if bytes.len() % record != 0 {
        tracing::warn!(path = %path.display(), "ignoring torn trailing cache record");
    }
    Ok(shard)
}

fn io_err(path: &Path, source: std::io::Error) -> EmbedError {
    EmbedError::Cache {
        path: path.to_path_buf(),
        source,
    }
}
