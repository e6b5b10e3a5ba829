use std::fs::{self, File, OpenOptions};
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::SystemTime;

use super::{check_bounds, check_name, not_found, Capabilities, FileStat, StorageBackend};
use crate::error::{Error, Result};

const TMP_PREFIX: &str = ".tmp-";

/// A checkpoint directory on the local filesystem.
#[derive(Debug)]
pub struct LocalBackend {
    root: PathBuf,
    tmp_seq: AtomicU64,
}

impl LocalBackend {
    pub fn open(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        fs::create_dir_all(&root)?;
        Ok(Self {
            root,
            tmp_seq: AtomicU64::new(0),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path_of(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn tmp_path(&self, name: &str) -> PathBuf {
        let seq = self.tmp_seq.fetch_add(1, Ordering::Relaxed);
        self.root.join(format!("{TMP_PREFIX}{}-{seq}-{name}", std::process::id()))
    }

    pub fn set_modified(&self, name: &str, when: SystemTime) -> Result<()> {
        let f = OpenOptions::new()
            .write(true)
            .open(self.path_of(name))
            .map_err(|_| not_found(name))?;
        f.set_modified(when)?;
        Ok(())
    }

    fn open_existing(&self, name: &str) -> Result<File> {
        check_name(name)?;
        File::open(self.path_of(name)).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => not_found(name),
            _ => Error::Io(e),
        })
    }
}

impl StorageBackend for LocalBackend {
    fn capabilities(&self) -> Capabilities {
        Capabilities {
            supports_range_read: true,
            supports_concat: true,
        }
    }

    fn write_file(&self, name: &str, bytes: &[u8]) -> Result<()> {
        check_name(name)?;
        let tmp = self.tmp_path(name);
        {
            let mut f = File::create(&tmp)?;
            f.write_all(bytes)?;
            f.sync_data()?;
        }
        fs::rename(&tmp, self.path_of(name))?;
        Ok(())
    }

    fn read_range(&self, name: &str, offset: u64, length: u64) -> Result<Vec<u8>> {
        let mut f = self.open_existing(name)?;
        check_bounds(name, f.metadata()?.len(), offset, length)?;
        f.seek(SeekFrom::Start(offset))?;
        let mut buf = vec![0u8; length as usize];
        f.read_exact(&mut buf).map_err(|e| Error::Read {
            file: name.to_string(),
            offset,
            reason: e.to_string(),
        })?;
        Ok(buf)
    }

    fn concat(&self, parts: &[String], target: &str) -> Result<()> {
        check_name(target)?;
        let tmp = self.tmp_path(target);
        {
            let mut out = File::create(&tmp)?;
            for p in parts {
                let mut src = self.open_existing(p)?;
                std::io::copy(&mut src, &mut out)?;
            }
            out.sync_data()?;
        }
        fs::rename(&tmp, self.path_of(target))?;
        for p in parts {
            if p != target {
                fs::remove_file(self.path_of(p))?;
            }
        }
        Ok(())
    }

    fn list(&self) -> Result<Vec<String>> {
        let mut names = Vec::new();
        for entry in fs::read_dir(&self.root)? {
            let entry = entry?;
            if !entry.file_type()?.is_file() {
                continue;
            }
            let name = entry.file_name().to_string_lossy().into_owned();
            if !name.starts_with(TMP_PREFIX) {
                names.push(name);
            }
        }
        names.sort();
        Ok(names)
    }

    fn stat(&self, name: &str) -> Result<FileStat> {
        let meta = self.open_existing(name)?.metadata()?;
        Ok(FileStat {
            len: meta.len(),
            last_modified: meta.modified()?,
        })
    }

    fn delete(&self, name: &str) -> Result<()> {
        check_name(name)?;
        fs::remove_file(self.path_of(name)).map_err(|_| not_found(name))
    }
}
