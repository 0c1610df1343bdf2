use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

pub const LOCK_FILE: &str = ".lock";
pub const FAILED_MARKER: &str = "FAILED";
pub const CONFIG_SNAPSHOT: &str = "config.txt";

/// An output directory owned by one process for the duration of a run.
///
/// The lock file is created with `create_new`, so a second process pointed
/// at the same directory fails instead of interleaving its artifacts.
#[derive(Debug)]
pub struct RunDir {
    path: PathBuf,
    locked: bool,
}

impl RunDir {
    pub fn create(path: &Path) -> Result<Self> {
        fs::create_dir_all(path).with_context(|| format!("creating run directory {}", path.display()))?;
        let lock = path.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&lock) {
            Ok(_) => {}
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                bail!("run directory {} is in use by another process (remove {} if it is stale)", path.display(), lock.display())
            }
            Err(e) => return Err(e).with_context(|| format!("creating {}", lock.display())),
        }
        let marker = path.join(FAILED_MARKER);
        if marker.exists() {
            fs::remove_file(&marker)?;
        }
        Ok(Self { path: path.to_path_buf(), locked: true })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn join(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    pub fn write(&self, name: &str, contents: impl AsRef<[u8]>) -> Result<()> {
        let p = self.join(name);
        fs::write(&p, contents).with_context(|| format!("writing {}", p.display()))
    }

    /// A nested run directory sharing this one's lock.
    pub fn subdir(&self, name: &str) -> Result<RunDir> {
        let path = self.join(name);
        fs::create_dir_all(&path).with_context(|| format!("creating {}", path.display()))?;
        Ok(RunDir { path, locked: false })
    }

    /// Releases the lock; on failure leaves a marker holding the error.
    pub fn finish<T>(mut self, result: Result<T>) -> Result<T> {
        if let Err(e) = &result {
            let _ = fs::write(self.join(FAILED_MARKER), format!("{e:#}\n"));
        }
        self.unlock();
        result
    }

    fn unlock(&mut self) {
        if self.locked {
            let _ = fs::remove_file(self.join(LOCK_FILE));
            self.locked = false;
        }
    }
}

impl Drop for RunDir {
    fn drop(&mut self) {
        self.unlock();
    }
}
