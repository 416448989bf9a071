//! File-backed bundle store.
//!
//! ```text
//! <root>/<site_id>/<version>.sfhb   immutable, version = checksum as 16 hex digits
//! <root>/<site_id>/index            one version per line, push order
//! <root>/<site_id>/index.lock       held while appending to the index
//! ```

use std::fs::{self, File, OpenOptions};
use std::io::{ErrorKind, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use super::{deserialize, serialize, Result, StatsBundle, StoreError};

const LOCK_ATTEMPTS: usize = 400;
const LOCK_BACKOFF: Duration = Duration::from_millis(5);

#[derive(Debug, Clone)]
pub struct Registry {
    root: PathBuf,
}

struct IndexLock(PathBuf);

impl Drop for IndexLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

impl Registry {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn site_dir(&self, site_id: &str) -> PathBuf {
        self.root.join(site_id)
    }

    pub fn push(&self, bundle: &StatsBundle) -> Result<String> {
        self.push_with_hook(bundle, || Ok(()))
    }

    /// `before_rename` runs after the temporary file is written and synced;
    /// an error from it aborts the push as a crash would.
    pub(crate) fn push_with_hook(
        &self,
        bundle: &StatsBundle,
        before_rename: impl FnOnce() -> Result<()>,
    ) -> Result<String> {
        let bytes = serialize(bundle)?;
        let body_end = bytes.len() - 8;
        let version =
            format!("{:016x}", u64::from_le_bytes(bytes[body_end - 8..body_end].try_into().expect("8 bytes")));
        let dir = self.site_dir(&bundle.meta.site_id);
        fs::create_dir_all(&dir)?;

        let tmp = dir.join(format!(".{version}.{}.{:?}.tmp", std::process::id(), std::thread::current().id()));
        {
            let mut f = File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        before_rename()?;
        fs::rename(&tmp, dir.join(format!("{version}.sfhb")))?;

        let _lock = self.lock_index(&dir)?;
        let mut index = OpenOptions::new().create(true).append(true).open(dir.join("index"))?;
        writeln!(index, "{version}")?;
        index.sync_all()?;
        Ok(version)
    }

    fn lock_index(&self, dir: &Path) -> Result<IndexLock> {
        let path = dir.join("index.lock");
        for _ in 0..LOCK_ATTEMPTS {
            match OpenOptions::new().write(true).create_new(true).open(&path) {
                Ok(_) => return Ok(IndexLock(path)),
                Err(e) if e.kind() == ErrorKind::AlreadyExists => std::thread::sleep(LOCK_BACKOFF),
                Err(e) => return Err(e.into()),
            }
        }
        Err(StoreError::ConcurrentWriteConflict(LOCK_ATTEMPTS))
    }

    /// Versions for a site in push order. Missing sites have none.
    pub fn versions(&self, site_id: &str) -> Result<Vec<String>> {
        match fs::read_to_string(self.site_dir(site_id).join("index")) {
            Ok(text) => Ok(text.lines().filter(|l| !l.is_empty()).map(str::to_owned).collect()),
            Err(e) if e.kind() == ErrorKind::NotFound => Ok(Vec::new()),
            Err(e) => Err(e.into()),
        }
    }

    pub fn pull(&self, site_id: &str, version: Option<&str>) -> Result<StatsBundle> {
        let version = match version {
            Some(v) => v.to_owned(),
            None => self
                .versions(site_id)?
                .pop()
                .ok_or_else(|| StoreError::NotFound(format!("no bundles for site {site_id:?}")))?,
        };
        if version.len() != 16 || !version.bytes().all(|b| b.is_ascii_hexdigit()) {
            return Err(StoreError::NotFound(format!("malformed version {version:?}")));
        }
        let path = self.site_dir(site_id).join(format!("{version}.sfhb"));
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == ErrorKind::NotFound => {
                return Err(StoreError::NotFound(format!("{site_id}/{version}")))
            }
            Err(e) => return Err(e.into()),
        };
        deserialize(&bytes)
    }
}

pub fn registry_push(store_path: impl AsRef<Path>, bundle: &StatsBundle) -> Result<String> {
    Registry::new(store_path.as_ref()).push(bundle)
}

pub fn registry_pull(store_path: impl AsRef<Path>, site_id: &str, version: Option<&str>) -> Result<StatsBundle> {
    Registry::new(store_path.as_ref()).pull(site_id, version)
}
