//! Content-addressed response cache.
//!
//! Entries are files named by the SHA-256 of their key, written through a
//! temporary file and renamed into place. Reads are lock-free; writes are
//! serialized.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use sha2::{Digest, Sha256};

use crate::{Error, Result};

pub fn sha256_hex(parts: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    hex::encode(h.finalize())
}

#[derive(Debug)]
pub struct ResponseCache {
    dir: Option<PathBuf>,
    write_lock: Mutex<()>,
    hits: AtomicUsize,
    misses: AtomicUsize,
}

impl ResponseCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        ResponseCache {
            dir: Some(dir.into()),
            write_lock: Mutex::new(()),
            hits: AtomicUsize::new(0),
            misses: AtomicUsize::new(0),
        }
    }

    /// A cache that stores nothing.
    pub fn disabled() -> Self {
        ResponseCache {
            dir: None,
            write_lock: Mutex::new(()),
            hits: AtomicUsize::new(0),
            misses: AtomicUsize::new(0),
        }
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    fn path_for(&self, key: &str) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(&key[..2]).join(key))
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let hit = self.path_for(key).and_then(|p| fs::read_to_string(p).ok());
        match hit {
            Some(_) => self.hits.fetch_add(1, Ordering::Relaxed),
            None => self.misses.fetch_add(1, Ordering::Relaxed),
        };
        hit
    }

    pub fn put(&self, key: &str, value: &str) -> Result<()> {
        let Some(path) = self.path_for(key) else {
            return Ok(());
        };
        let _guard = self.write_lock.lock().unwrap_or_else(|e| e.into_inner());
        let parent = path.parent().expect("cache path has a parent");
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        let mut tmp = tempfile::NamedTempFile::new_in(parent).map_err(|e| Error::io(parent, e))?;
        tmp.write_all(value.as_bytes()).map_err(|e| Error::io(&path, e))?;
        tmp.persist(&path).map_err(|e| Error::io(&path, e.error))?;
        Ok(())
    }

    pub fn hits(&self) -> usize {
        self.hits.load(Ordering::Relaxed)
    }

    pub fn misses(&self) -> usize {
        self.misses.load(Ordering::Relaxed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn put_get_and_counters() {
        let dir = tempfile::tempdir().unwrap();
        let c = ResponseCache::new(dir.path());
        let k = sha256_hex(&[b"model", b"text"]);
        assert_eq!(c.get(&k), None);
        c.put(&k, "value").unwrap();
        assert_eq!(c.get(&k).as_deref(), Some("value"));
        assert_eq!((c.hits(), c.misses()), (1, 1));
    }

    #[test]
    fn keys_are_length_prefixed() {
        assert_ne!(sha256_hex(&[b"ab", b"c"]), sha256_hex(&[b"a", b"bc"]));
    }

    #[test]
    fn disabled_cache_never_hits() {
        let c = ResponseCache::disabled();
        c.put("abcd", "v").unwrap();
        assert_eq!(c.get("abcd"), None);
    }
}
