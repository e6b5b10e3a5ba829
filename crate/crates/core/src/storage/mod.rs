//! Storage I/O layer.
//!
//! Backends are selected from the checkpoint URI scheme (`mem://`, `file://`,
//! `chunked://`). All backends store flat named files inside one checkpoint
//! directory and must accept concurrent operations on distinct files.

mod chunked;
mod instrument;
mod local;
mod memory;
mod ops;
mod tiered;

use std::fmt;
use std::sync::Arc;
use std::time::{Duration, SystemTime};

use crate::error::{Error, Result};

pub use chunked::{ChunkedRemoteBackend, ChunkedRemoteConfig, ConcatMode, RemoteCounters};
pub use instrument::{CountingBackend, FaultyBackend, ReadOp};
pub use local::LocalBackend;
pub use memory::MemoryBackend;
pub use ops::{
    chunked_write, is_part_name, parallel_range_read, part_name, ChunkedWriteConfig, ChunkedWriteReport,
    RetryPolicy,
};
pub use tiered::{cool_down, MigrationReport, TierConfig, TieredBackend};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Capabilities {
    pub supports_range_read: bool,
    pub supports_concat: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FileStat {
    pub len: u64,
    pub last_modified: SystemTime,
}

pub trait StorageBackend: Send + Sync + fmt::Debug {
    fn capabilities(&self) -> Capabilities;

    /// Creates or replaces `name` with `bytes`.
    fn write_file(&self, name: &str, bytes: &[u8]) -> Result<()>;

    fn read_range(&self, name: &str, offset: u64, length: u64) -> Result<Vec<u8>>;

    /// Merges `parts` (in order) into `target` and removes the parts.
    fn concat(&self, parts: &[String], target: &str) -> Result<()>;

    /// Visible file names, sorted.
    fn list(&self) -> Result<Vec<String>>;

    fn stat(&self, name: &str) -> Result<FileStat>;

    fn delete(&self, name: &str) -> Result<()>;

    fn read_file(&self, name: &str) -> Result<Vec<u8>> {
        let stat = self.stat(name)?;
        self.read_range(name, 0, stat.len)
    }

    fn exists(&self, name: &str) -> bool {
        self.stat(name).is_ok()
    }
}

impl<B: StorageBackend + ?Sized> StorageBackend for Arc<B> {
    fn capabilities(&self) -> Capabilities {
        (**self).capabilities()
    }
    fn write_file(&self, name: &str, bytes: &[u8]) -> Result<()> {
        (**self).write_file(name, bytes)
    }
    fn read_range(&self, name: &str, offset: u64, length: u64) -> Result<Vec<u8>> {
        (**self).read_range(name, offset, length)
    }
    fn concat(&self, parts: &[String], target: &str) -> Result<()> {
        (**self).concat(parts, target)
    }
    fn list(&self) -> Result<Vec<String>> {
        (**self).list()
    }
    fn stat(&self, name: &str) -> Result<FileStat> {
        (**self).stat(name)
    }
    fn delete(&self, name: &str) -> Result<()> {
        (**self).delete(name)
    }
}

pub(crate) fn not_found(name: &str) -> Error {
    Error::Read {
        file: name.to_string(),
        offset: 0,
        reason: "no such file".into(),
    }
}

pub(crate) fn check_bounds(name: &str, file_len: u64, offset: u64, length: u64) -> Result<()> {
    if offset.checked_add(length).is_none_or(|end| end > file_len) {
        return Err(Error::Read {
            file: name.to_string(),
            offset,
            reason: format!("short read: wanted {length} bytes, file has {file_len}"),
        });
    }
    Ok(())
}

pub(crate) fn check_name(name: &str) -> Result<()> {
    if name.is_empty() || name.contains('/') || name.contains('\\') || name == "." || name == ".." {
        return Err(Error::Storage(format!("invalid file name `{name}`")));
    }
    Ok(())
}

/// Opens the backend named by a checkpoint URI.
///
/// `mem://<name>` resolves to a process-wide in-memory store, so repeated
/// opens of the same URI share contents. Paths without a scheme are treated
/// as `file://`.
pub fn open_backend(uri: &str) -> Result<Arc<dyn StorageBackend>> {
    if let Some(name) = uri.strip_prefix("mem://") {
        return Ok(MemoryBackend::named(name));
    }
    if let Some(path) = uri.strip_prefix("chunked://") {
        return Ok(Arc::new(ChunkedRemoteBackend::open(path, ChunkedRemoteConfig::default())?));
    }
    if let Some(path) = uri.strip_prefix("file://") {
        return Ok(Arc::new(LocalBackend::open(path)?));
    }
    if uri.contains("://") {
        return Err(Error::Config(format!("unsupported storage scheme in `{uri}`")));
    }
    Ok(Arc::new(LocalBackend::open(uri)?))
}

/// `now - age`, saturating at the epoch.
pub(crate) fn before(now: SystemTime, age: Duration) -> SystemTime {
    now.checked_sub(age).unwrap_or(SystemTime::UNIX_EPOCH)
}
