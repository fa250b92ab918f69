//! On-disk response cache: one directory per provider, one file per entry named by
//! the lowercase hex SHA-256 of `(provider_id, prompt)`.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::time::SystemTime;

use sha2::{Digest, Sha256};

pub const EMBEDDING_MAGIC: &[u8; 8] = b"CDSREMB1";

#[derive(Clone, Debug, PartialEq)]
pub enum CachedValue {
    Embedding(Vec<f32>),
    Completion(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct CacheEntry {
    pub key: String,
    pub value: CachedValue,
    pub created_at: Option<SystemTime>,
}

#[derive(Clone, Debug)]
pub struct ResponseCache {
    root: PathBuf,
}

pub fn cache_key(provider_id: &str, prompt: &str) -> String {
    let mut h = Sha256::new();
    h.update((provider_id.len() as u64).to_le_bytes());
    h.update(provider_id.as_bytes());
    h.update(prompt.as_bytes());
    hex::encode(h.finalize())
}

/// Provider ids may contain characters that are awkward in paths (`:` `/`).
fn provider_dir_name(provider_id: &str) -> String {
    provider_id.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' { c } else { '_' }).collect()
}

pub fn encode_embedding(v: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * v.len());
    out.extend_from_slice(EMBEDDING_MAGIC);
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

pub fn decode_embedding(bytes: &[u8]) -> Option<Vec<f32>> {
    let body = bytes.strip_prefix(EMBEDDING_MAGIC.as_slice())?;
    if body.len() % 4 != 0 {
        return None;
    }
    Some(body.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
}

/// Writes `bytes` to `path` via a temporary file in the same directory and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.flush()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

impl ResponseCache {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn entry_path(&self, provider_id: &str, prompt: &str) -> PathBuf {
        self.root.join(provider_dir_name(provider_id)).join(cache_key(provider_id, prompt))
    }

    pub fn get_embedding(&self, provider_id: &str, prompt: &str) -> Option<Vec<f32>> {
        let bytes = fs::read(self.entry_path(provider_id, prompt)).ok()?;
        let v = decode_embedding(&bytes);
        if v.is_none() {
            log::warn!("ignoring corrupt embedding cache entry for provider {provider_id}");
        }
        v
    }

    pub fn put_embedding(&self, provider_id: &str, prompt: &str, v: &[f32]) -> io::Result<()> {
        write_atomic(&self.entry_path(provider_id, prompt), &encode_embedding(v))
    }

    pub fn get_completion(&self, provider_id: &str, prompt: &str) -> Option<String> {
        let bytes = fs::read(self.entry_path(provider_id, prompt)).ok()?;
        if bytes.starts_with(EMBEDDING_MAGIC) {
            return None;
        }
        String::from_utf8(bytes).ok().filter(|s| !s.is_empty())
    }

    pub fn put_completion(&self, provider_id: &str, prompt: &str, text: &str) -> io::Result<()> {
        write_atomic(&self.entry_path(provider_id, prompt), text.as_bytes())
    }

    pub fn entry(&self, provider_id: &str, prompt: &str) -> Option<CacheEntry> {
        let path = self.entry_path(provider_id, prompt);
        let created_at = fs::metadata(&path).and_then(|m| m.modified()).ok();
        let bytes = fs::read(&path).ok()?;
        let value = match decode_embedding(&bytes) {
            Some(v) => CachedValue::Embedding(v),
            None => CachedValue::Completion(String::from_utf8(bytes).ok()?),
        };
        Some(CacheEntry { key: cache_key(provider_id, prompt), value, created_at })
    }
}
