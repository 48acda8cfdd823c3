//! Durable storage behind a narrow interface: one state snapshot plus a
//! content blob namespace (payloads, shared files, bundles, archives).

use std::collections::HashMap;
use std::fs;
use std::io;
use std::path::PathBuf;
use std::sync::{Mutex, MutexGuard};

pub trait Store: Send + Sync {
    fn load_state(&self) -> io::Result<Option<Vec<u8>>>;
    /// Replaces the snapshot atomically.
    fn save_state(&self, bytes: &[u8]) -> io::Result<()>;
    fn put_blob(&self, key: &str, bytes: &[u8]) -> io::Result<()>;
    fn get_blob(&self, key: &str) -> io::Result<Option<Vec<u8>>>;
}

/// Keeps everything in memory; state is lost with the process.
#[derive(Default)]
pub struct MemoryStore {
    state: Mutex<Option<Vec<u8>>>,
    blobs: Mutex<HashMap<String, Vec<u8>>>,
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|e| e.into_inner())
}

impl Store for MemoryStore {
    fn load_state(&self) -> io::Result<Option<Vec<u8>>> {
        Ok(lock(&self.state).clone())
    }

    fn save_state(&self, bytes: &[u8]) -> io::Result<()> {
        *lock(&self.state) = Some(bytes.to_vec());
        Ok(())
    }

    fn put_blob(&self, key: &str, bytes: &[u8]) -> io::Result<()> {
        lock(&self.blobs).insert(key.to_string(), bytes.to_vec());
        Ok(())
    }

    fn get_blob(&self, key: &str) -> io::Result<Option<Vec<u8>>> {
        Ok(lock(&self.blobs).get(key).cloned())
    }
}

/// Snapshot in `<dir>/state.json`, blobs under `<dir>/blobs/`.
pub struct FileStore {
    dir: PathBuf,
}

impl FileStore {
    pub fn open(dir: impl Into<PathBuf>) -> io::Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(dir.join("blobs"))?;
        Ok(FileStore { dir })
    }

    fn blob_path(&self, key: &str) -> io::Result<PathBuf> {
        if key.is_empty()
            || key.starts_with('/')
            || key.split('/').any(|c| c.is_empty() || c == "." || c == "..")
        {
            return Err(io::Error::new(io::ErrorKind::InvalidInput, format!("bad blob key {key:?}")));
        }
        Ok(self.dir.join("blobs").join(key))
    }

    fn write_atomic(path: &PathBuf, bytes: &[u8]) -> io::Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, bytes)?;
        fs::rename(&tmp, path)
    }
}

impl Store for FileStore {
    fn load_state(&self) -> io::Result<Option<Vec<u8>>> {
        match fs::read(self.dir.join("state.json")) {
            Ok(b) => Ok(Some(b)),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e),
        }
    }

    fn save_state(&self, bytes: &[u8]) -> io::Result<()> {
        Self::write_atomic(&self.dir.join("state.json"), bytes)
    }

    fn put_blob(&self, key: &str, bytes: &[u8]) -> io::Result<()> {
        Self::write_atomic(&self.blob_path(key)?, bytes)
    }

    fn get_blob(&self, key: &str) -> io::Result<Option<Vec<u8>>> {
        match fs::read(self.blob_path(key)?) {
            Ok(b) => Ok(Some(b)),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e),
        }
    }
}
