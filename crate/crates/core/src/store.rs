//! On-disk store layout, advisory locking and atomic writes.
//!
//! ```text
//! <root>/registry.json
//! <root>/registry.lock
//! <root>/envs/<env_id>/          provisioned environment
//! <root>/envs/<env_id>.log       provisioning output
//! <root>/envs/<env_id>.lock      per-environment provisioning lock
//! <root>/runs/<run_id>/          one directory per run
//! ```

use std::fs::{self, File, OpenOptions, TryLockError};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::thread;
use std::time::{Duration, Instant};

use sha2::{Digest, Sha256};

use crate::error::{Error, IoContext, Result};

pub const DEFAULT_LOCK_TIMEOUT: Duration = Duration::from_secs(10);
pub const DEFAULT_PROVISION_TIMEOUT: Duration = Duration::from_secs(600);

const LOCK_POLL: Duration = Duration::from_millis(20);

#[derive(Debug, Clone)]
pub struct Store {
    root: PathBuf,
    pub lock_timeout: Duration,
    pub provision_timeout: Duration,
}

impl Store {
    /// Opens a store rooted at `root`. Directories are created lazily.
    pub fn new(root: impl Into<PathBuf>) -> Self {
        let root = root.into();
        let root = if root.is_absolute() {
            root
        } else {
            std::env::current_dir()
                .map(|cwd| cwd.join(&root))
                .unwrap_or(root)
        };
        Self {
            root,
            lock_timeout: DEFAULT_LOCK_TIMEOUT,
            provision_timeout: DEFAULT_PROVISION_TIMEOUT,
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn registry_path(&self) -> PathBuf {
        self.root.join("registry.json")
    }

    pub fn registry_lock_path(&self) -> PathBuf {
        self.root.join("registry.lock")
    }

    pub fn envs_dir(&self) -> PathBuf {
        self.root.join("envs")
    }

    pub fn runs_dir(&self) -> PathBuf {
        self.root.join("runs")
    }

    pub(crate) fn ensure_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).context(|| format!("creating {}", dir.display()))
    }
}

/// Exclusive advisory lock held until drop.
#[derive(Debug)]
pub struct LockGuard {
    file: File,
}

impl Drop for LockGuard {
    fn drop(&mut self) {
        let _ = self.file.unlock();
    }
}

/// Polls for an exclusive lock on `path` until `timeout` elapses.
///
/// Returns `Ok(None)` on timeout so callers can pick the error variant.
pub(crate) fn acquire_lock(path: &Path, timeout: Duration) -> Result<Option<LockGuard>> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).context(|| format!("creating {}", parent.display()))?;
    }
    let file = OpenOptions::new()
        .create(true)
        .truncate(false)
        .write(true)
        .open(path)
        .context(|| format!("opening lock file {}", path.display()))?;
    let deadline = Instant::now() + timeout;
    loop {
        match file.try_lock() {
            Ok(()) => return Ok(Some(LockGuard { file })),
            Err(TryLockError::WouldBlock) => {
                if Instant::now() >= deadline {
                    return Ok(None);
                }
                thread::sleep(LOCK_POLL);
            }
            Err(TryLockError::Error(e)) => {
                return Err(Error::io(format!("locking {}", path.display()), e))
            }
        }
    }
}

/// Writes `bytes` to a sibling temp file, fsyncs, then renames over `path`.
pub(crate) fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    fs::create_dir_all(dir).context(|| format!("creating {}", dir.display()))?;
    let file_name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let tmp = dir.join(format!(".{file_name}.{}.tmp", random_hex(8)));
    let write = || -> std::io::Result<()> {
        let mut f = File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    };
    write().map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(format!("writing {}", path.display()), e)
    })
}

/// Lowercase hex SHA-256.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub(crate) fn random_hex(n_chars: usize) -> String {
    let bytes: Vec<u8> = (0..n_chars.div_ceil(2)).map(|_| rand::random()).collect();
    let mut s = hex::encode(bytes);
    s.truncate(n_chars);
    s
}

pub(crate) fn is_lower_hex(s: &str, len: usize) -> bool {
    s.len() == len && s.bytes().all(|b| matches!(b, b'0'..=b'9' | b'a'..=b'f'))
}
