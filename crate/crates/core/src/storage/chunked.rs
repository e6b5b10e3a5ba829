use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::thread;
use std::time::Duration;

use super::local::LocalBackend;
use super::ops::is_part_name;
use super::{Capabilities, FileStat, StorageBackend};
use crate::error::{Error, Result};

const STAGING_DIR: &str = ".staging";

/// How the emulated namenode merges sub-files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ConcatMode {
    /// One metadata operation per part, applied one after another.
    Serial,
    /// All parts merged in one metadata operation.
    #[default]
    Parallel,
}

#[derive(Debug, Clone, Default)]
pub struct ChunkedRemoteConfig {
    /// Latency of every data operation (write, read).
    pub data_latency: Duration,
    /// Latency of every metadata operation (create, concat step, stat, list, delete).
    pub metadata_latency: Duration,
    pub concat_mode: ConcatMode,
    /// Largest payload accepted by a plain `write_file`; bigger files must
    /// be uploaded as parts and concatenated.
    pub max_single_write: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RemoteCounters {
    pub metadata_ops: u64,
    pub data_ops: u64,
    pub part_writes: u64,
    pub concats: u64,
}

/// Emulates an append-only remote filesystem: sub-files are staged out of
/// sight and only published by a metadata-level concat.
#[derive(Debug)]
pub struct ChunkedRemoteBackend {
    published: LocalBackend,
    staging: LocalBackend,
    cfg: ChunkedRemoteConfig,
    metadata_ops: AtomicU64,
    data_ops: AtomicU64,
    part_writes: AtomicU64,
    concats: AtomicU64,
}

impl ChunkedRemoteBackend {
    pub fn open(root: impl AsRef<Path>, cfg: ChunkedRemoteConfig) -> Result<Self> {
        let root = root.as_ref();
        Ok(Self {
            published: LocalBackend::open(root)?,
            staging: LocalBackend::open(root.join(STAGING_DIR))?,
            cfg,
            metadata_ops: AtomicU64::new(0),
            data_ops: AtomicU64::new(0),
            part_writes: AtomicU64::new(0),
            concats: AtomicU64::new(0),
        })
    }

    pub fn counters(&self) -> RemoteCounters {
        RemoteCounters {
            metadata_ops: self.metadata_ops.load(Ordering::Relaxed),
            data_ops: self.data_ops.load(Ordering::Relaxed),
            part_writes: self.part_writes.load(Ordering::Relaxed),
            concats: self.concats.load(Ordering::Relaxed),
        }
    }

    pub fn local(&self) -> &LocalBackend {
        &self.published
    }

    fn metadata_op(&self) {
        self.metadata_ops.fetch_add(1, Ordering::Relaxed);
        if !self.cfg.metadata_latency.is_zero() {
            thread::sleep(self.cfg.metadata_latency);
        }
    }

    fn data_op(&self) {
        self.data_ops.fetch_add(1, Ordering::Relaxed);
        if !self.cfg.data_latency.is_zero() {
            thread::sleep(self.cfg.data_latency);
        }
    }

    fn side(&self, name: &str) -> &LocalBackend {
        if is_part_name(name) {
            &self.staging
        } else {
            &self.published
        }
    }
}

impl StorageBackend for ChunkedRemoteBackend {
    fn capabilities(&self) -> Capabilities {
        Capabilities {
            supports_range_read: true,
            supports_concat: true,
        }
    }

    fn write_file(&self, name: &str, bytes: &[u8]) -> Result<()> {
        let is_part = is_part_name(name);
        if !is_part {
            if let Some(limit) = self.cfg.max_single_write {
                if bytes.len() as u64 > limit {
                    return Err(Error::Storage(format!(
                        "`{name}`: {} bytes exceeds the single-write limit of {limit}; use chunked_write",
                        bytes.len()
                    )));
                }
            }
        } else {
            self.part_writes.fetch_add(1, Ordering::Relaxed);
        }
        self.metadata_op();
        self.data_op();
        self.side(name).write_file(name, bytes)
    }

    fn read_range(&self, name: &str, offset: u64, length: u64) -> Result<Vec<u8>> {
        self.data_op();
        self.side(name).read_range(name, offset, length)
    }

    fn concat(&self, parts: &[String], target: &str) -> Result<()> {
        self.concats.fetch_add(1, Ordering::Relaxed);
        match self.cfg.concat_mode {
            ConcatMode::Serial => parts.iter().for_each(|_| self.metadata_op()),
            ConcatMode::Parallel => self.metadata_op(),
        }
        // Stage the merged file, then publish it with a rename.
        let staged = super::ops::part_name(target, usize::MAX);
        self.staging.concat(parts, &staged)?;
        std::fs::rename(self.staging.path_of(&staged), self.published.path_of(target))?;
        Ok(())
    }

    fn list(&self) -> Result<Vec<String>> {
        self.metadata_op();
        self.published.list()
    }

    fn stat(&self, name: &str) -> Result<FileStat> {
        self.metadata_op();
        self.side(name).stat(name)
    }

    fn delete(&self, name: &str) -> Result<()> {
        self.metadata_op();
        self.side(name).delete(name)
    }
}
