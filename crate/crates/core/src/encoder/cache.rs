use std::fs::{File, OpenOptions};
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use dashmap::DashMap;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"HRECACHE";
const VERSION: u32 = 1;

/// Stable 64-bit key over (backend, template, text, placeholders rounded to
/// 6 decimals).
pub fn cache_key(backend: &str, template_id: &str, text: &str, placeholders: &[Vec<f64>]) -> u64 {
    let mut h = Sha256::new();
    for part in [backend, template_id, text] {
        h.update((part.len() as u64).to_le_bytes());
        h.update(part.as_bytes());
    }
    h.update((placeholders.len() as u64).to_le_bytes());
    for v in placeholders {
        h.update((v.len() as u64).to_le_bytes());
        for x in v {
            let q = (x * 1e6).round() as i64;
            h.update(q.to_le_bytes());
        }
    }
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

/// Concurrent key → vector cache, optionally backed by an append-only file.
///
/// File layout: `HRECACHE`, version (u32 LE), then records of key (u64 LE),
/// dim (u32 LE), and `dim` f64 LE values.
#[derive(Debug, Default)]
pub struct EmbeddingCache {
    map: DashMap<u64, Arc<[f64]>>,
    pending: Mutex<Vec<u64>>,
    path: Option<PathBuf>,
}

impl EmbeddingCache {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Open (or start) a persistent cache at `path`.
    pub fn open(path: &Path) -> Result<Self> {
        let cache = Self {
            path: Some(path.to_path_buf()),
            ..Self::default()
        };
        let file = match File::open(path) {
            Ok(f) => f,
            Err(e) if e.kind() == ErrorKind::NotFound => return Ok(cache),
            Err(e) => return Err(e.into()),
        };
        let mut r = BufReader::new(file);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Encoder(format!("{} is not an embedding cache", path.display())));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(Error::Encoder(format!("unsupported cache version {version}")));
        }
        loop {
            let mut kb = [0u8; 8];
            match r.read_exact(&mut kb) {
                Ok(()) => {}
                Err(e) if e.kind() == ErrorKind::UnexpectedEof => break,
                Err(e) => return Err(e.into()),
            }
            let key = u64::from_le_bytes(kb);
            let dim = read_u32(&mut r)? as usize;
            let mut buf = vec![0u8; dim * 8];
            r.read_exact(&mut buf)?;
            let v: Vec<f64> = buf
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            cache.map.insert(key, v.into());
        }
        Ok(cache)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn get(&self, key: u64) -> Option<Arc<[f64]>> {
        self.map.get(&key).map(|v| Arc::clone(&v))
    }

    /// Insert unless present; returns whichever value ended up stored.
    pub fn insert(&self, key: u64, value: Vec<f64>) -> Arc<[f64]> {
        let mut won = false;
        let stored = self
            .map
            .entry(key)
            .or_insert_with(|| {
                won = true;
                value.into()
            })
            .clone();
        if won {
            self.pending.lock().unwrap().push(key);
        }
        stored
    }

    /// Append entries added since the last persist to the backing file.
    /// No-op for in-memory caches.
    pub fn persist(&self) -> Result<()> {
        let Some(path) = &self.path else {
            return Ok(());
        };
        let mut pending = std::mem::take(&mut *self.pending.lock().unwrap());
        if pending.is_empty() && path.exists() {
            return Ok(());
        }
        pending.sort_unstable();
        let fresh = !path.exists();
        let mut w = BufWriter::new(OpenOptions::new().create(true).append(true).open(path)?);
        if fresh {
            w.write_all(MAGIC)?;
            w.write_all(&VERSION.to_le_bytes())?;
        }
        for key in pending {
            let v = self.get(key).expect("pending keys are stored");
            w.write_all(&key.to_le_bytes())?;
            w.write_all(&(v.len() as u32).to_le_bytes())?;
            for x in v.iter() {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}
