//! Content-addressed blob storage with a two-level hash fan-out
//! (`root/ab/cd/abcd...`).

use std::collections::HashMap;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use parking_lot::Mutex;
use sha2::{Digest, Sha256};

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug)]
pub enum BlobStore {
    Dir(PathBuf),
    Memory(Mutex<HashMap<String, Vec<u8>>>),
}

impl BlobStore {
    pub fn dir(root: impl Into<PathBuf>) -> io::Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        Ok(BlobStore::Dir(root))
    }

    pub fn memory() -> Self {
        BlobStore::Memory(Mutex::new(HashMap::new()))
    }

    pub fn path_for(root: &Path, digest: &str) -> PathBuf {
        root.join(&digest[0..2]).join(&digest[2..4]).join(digest)
    }

    /// Stores `bytes` under their SHA-256 digest. Identical content is
    /// stored once. Returns the digest and whether new bytes were written.
    pub fn put(&self, bytes: &[u8]) -> io::Result<(String, bool)> {
        let digest = sha256_hex(bytes);
        match self {
            BlobStore::Memory(map) => {
                let mut map = map.lock();
                let fresh = !map.contains_key(&digest);
                if fresh {
                    map.insert(digest.clone(), bytes.to_vec());
                }
                Ok((digest, fresh))
            }
            BlobStore::Dir(root) => {
                let path = Self::path_for(root, &digest);
                if path.exists() {
                    return Ok((digest, false));
                }
                let dir = path.parent().expect("fan-out parent");
                fs::create_dir_all(dir)?;
                // Write to a unique temp file, then rename into place.
                let tmp = dir.join(format!(".{digest}.{}.tmp", std::process::id() as u64 ^ rand::random::<u64>()));
                {
                    let mut f = fs::File::create(&tmp)?;
                    f.write_all(bytes)?;
                    f.sync_all()?;
                }
                fs::rename(&tmp, &path)?;
                Ok((digest, true))
            }
        }
    }

    pub fn get(&self, digest: &str) -> io::Result<Vec<u8>> {
        if digest.len() < 4 || !digest.bytes().all(|b| b.is_ascii_hexdigit()) {
            return Err(io::Error::new(io::ErrorKind::InvalidInput, "malformed digest"));
        }
        match self {
            BlobStore::Memory(map) => map
                .lock()
                .get(digest)
                .cloned()
                .ok_or_else(|| io::Error::new(io::ErrorKind::NotFound, "blob missing")),
            BlobStore::Dir(root) => fs::read(Self::path_for(root, digest)),
        }
    }

    /// Total bytes held, counting each distinct blob once.
    pub fn stored_bytes(&self) -> io::Result<u64> {
        match self {
            BlobStore::Memory(map) => Ok(map.lock().values().map(|v| v.len() as u64).sum()),
            BlobStore::Dir(root) => {
                let mut total = 0;
                for a in fs::read_dir(root)? {
                    let a = a?;
                    if !a.file_type()?.is_dir() {
                        continue;
                    }
                    for b in fs::read_dir(a.path())? {
                        let b = b?;
                        if !b.file_type()?.is_dir() {
                            continue;
                        }
                        for f in fs::read_dir(b.path())? {
                            let f = f?;
                            if !f.file_name().to_string_lossy().starts_with('.') {
                                total += f.metadata()?.len();
                            }
                        }
                    }
                }
                Ok(total)
            }
        }
    }
}
