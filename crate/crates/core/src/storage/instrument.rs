use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use super::{Capabilities, FileStat, StorageBackend};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ReadOp {
    pub file: String,
    pub offset: u64,
    pub length: u64,
}

/// Records every read and counts writes of the wrapped backend.
#[derive(Debug)]
pub struct CountingBackend<B> {
    inner: B,
    reads: Mutex<Vec<ReadOp>>,
    writes: AtomicU64,
    concats: AtomicU64,
}

impl<B: StorageBackend> CountingBackend<B> {
    pub fn new(inner: B) -> Self {
        Self {
            inner,
            reads: Mutex::new(Vec::new()),
            writes: AtomicU64::new(0),
            concats: AtomicU64::new(0),
        }
    }

    pub fn inner(&self) -> &B {
        &self.inner
    }

    pub fn reads(&self) -> Vec<ReadOp> {
        self.reads.lock().unwrap().clone()
    }

    pub fn writes(&self) -> u64 {
        self.writes.load(Ordering::Relaxed)
    }

    pub fn concats(&self) -> u64 {
        self.concats.load(Ordering::Relaxed)
    }

    pub fn reset(&self) {
        self.reads.lock().unwrap().clear();
        self.writes.store(0, Ordering::Relaxed);
        self.concats.store(0, Ordering::Relaxed);
    }
}

impl<B: StorageBackend> StorageBackend for CountingBackend<B> {
    fn capabilities(&self) -> Capabilities {
        self.inner.capabilities()
    }
    fn write_file(&self, name: &str, bytes: &[u8]) -> Result<()> {
        self.writes.fetch_add(1, Ordering::Relaxed);
        self.inner.write_file(name, bytes)
    }
    fn read_range(&self, name: &str, offset: u64, length: u64) -> Result<Vec<u8>> {
        self.reads.lock().unwrap().push(ReadOp {
            file: name.to_string(),
            offset,
            length,
        });
        self.inner.read_range(name, offset, length)
    }
    fn concat(&self, parts: &[String], target: &str) -> Result<()> {
        self.concats.fetch_add(1, Ordering::Relaxed);
        self.inner.concat(parts, target)
    }
    fn list(&self) -> Result<Vec<String>> {
        self.inner.list()
    }
    fn stat(&self, name: &str) -> Result<FileStat> {
        self.inner.stat(name)
    }
    fn delete(&self, name: &str) -> Result<()> {
        self.inner.delete(name)
    }
}

#[derive(Debug)]
struct WriteFault {
    pattern: String,
    remaining: Option<u64>,
}

/// Injects write failures into the wrapped backend.
#[derive(Debug)]
pub struct FaultyBackend<B> {
    inner: B,
    faults: Mutex<Vec<WriteFault>>,
    failed_writes: AtomicU64,
}

impl<B: StorageBackend> FaultyBackend<B> {
    pub fn new(inner: B) -> Self {
        Self {
            inner,
            faults: Mutex::new(Vec::new()),
            failed_writes: AtomicU64::new(0),
        }
    }

    pub fn inner(&self) -> &B {
        &self.inner
    }

    /// Fails the next `times` writes whose name contains `pattern`.
    pub fn fail_writes_matching(&self, pattern: &str, times: u64) {
        self.faults.lock().unwrap().push(WriteFault {
            pattern: pattern.to_string(),
            remaining: Some(times),
        });
    }

    /// Fails every write whose name contains `pattern`.
    pub fn fail_writes_permanently(&self, pattern: &str) {
        self.faults.lock().unwrap().push(WriteFault {
            pattern: pattern.to_string(),
            remaining: None,
        });
    }

    pub fn clear_faults(&self) {
        self.faults.lock().unwrap().clear();
    }

    pub fn failed_writes(&self) -> u64 {
        self.failed_writes.load(Ordering::Relaxed)
    }

    fn should_fail(&self, name: &str) -> bool {
        let mut faults = self.faults.lock().unwrap();
        for f in faults.iter_mut() {
            if name.contains(&f.pattern) {
                match &mut f.remaining {
                    None => return true,
                    Some(0) => {}
                    Some(n) => {
                        *n -= 1;
                        return true;
                    }
                }
            }
        }
        false
    }
}

impl<B: StorageBackend> StorageBackend for FaultyBackend<B> {
    fn capabilities(&self) -> Capabilities {
        self.inner.capabilities()
    }
    fn write_file(&self, name: &str, bytes: &[u8]) -> Result<()> {
        if self.should_fail(name) {
            self.failed_writes.fetch_add(1, Ordering::Relaxed);
            return Err(Error::Storage(format!("injected write failure on `{name}`")));
        }
        self.inner.write_file(name, bytes)
    }
    fn read_range(&self, name: &str, offset: u64, length: u64) -> Result<Vec<u8>> {
        self.inner.read_range(name, offset, length)
    }
    fn concat(&self, parts: &[String], target: &str) -> Result<()> {
        if self.should_fail(target) {
            self.failed_writes.fetch_add(1, Ordering::Relaxed);
            return Err(Error::Storage(format!("injected concat failure on `{target}`")));
        }
        self.inner.concat(parts, target)
    }
    fn list(&self) -> Result<Vec<String>> {
        self.inner.list()
    }
    fn stat(&self, name: &str) -> Result<FileStat> {
        self.inner.stat(name)
    }
    fn delete(&self, name: &str) -> Result<()> {
        self.inner.delete(name)
    }
}
