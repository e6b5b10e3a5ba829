use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, Mutex, OnceLock, RwLock};
use std::time::SystemTime;

use super::{check_bounds, check_name, not_found, Capabilities, FileStat, StorageBackend};
use crate::error::Result;

#[derive(Debug, Clone)]
struct MemFile {
    data: Arc<Vec<u8>>,
    modified: SystemTime,
}

/// In-memory backend for tests and single-process simulation.
#[derive(Debug)]
pub struct MemoryBackend {
    files: RwLock<BTreeMap<String, MemFile>>,
    caps: Capabilities,
}

impl Default for MemoryBackend {
    fn default() -> Self {
        Self::new()
    }
}

impl MemoryBackend {
    pub fn new() -> Self {
        Self::with_capabilities(Capabilities {
            supports_range_read: true,
            supports_concat: true,
        })
    }

    pub fn with_capabilities(caps: Capabilities) -> Self {
        Self {
            files: RwLock::new(BTreeMap::new()),
            caps,
        }
    }

    /// Process-wide store shared by every `mem://<name>` URI.
    pub fn named(name: &str) -> Arc<MemoryBackend> {
        static REGISTRY: OnceLock<Mutex<HashMap<String, Arc<MemoryBackend>>>> = OnceLock::new();
        let mut reg = REGISTRY.get_or_init(Default::default).lock().unwrap();
        reg.entry(name.to_string())
            .or_insert_with(|| Arc::new(MemoryBackend::new()))
            .clone()
    }

    /// Overrides a file's modification time.
    pub fn set_modified(&self, name: &str, when: SystemTime) -> Result<()> {
        let mut files = self.files.write().unwrap();
        let f = files.get_mut(name).ok_or_else(|| not_found(name))?;
        f.modified = when;
        Ok(())
    }

    pub fn clear(&self) {
        self.files.write().unwrap().clear();
    }
}

impl StorageBackend for MemoryBackend {
    fn capabilities(&self) -> Capabilities {
        self.caps
    }

    fn write_file(&self, name: &str, bytes: &[u8]) -> Result<()> {
        check_name(name)?;
        self.files.write().unwrap().insert(
            name.to_string(),
            MemFile {
                data: Arc::new(bytes.to_vec()),
                modified: SystemTime::now(),
            },
        );
        Ok(())
    }

    fn read_range(&self, name: &str, offset: u64, length: u64) -> Result<Vec<u8>> {
        let data = {
            let files = self.files.read().unwrap();
            files.get(name).ok_or_else(|| not_found(name))?.data.clone()
        };
        check_bounds(name, data.len() as u64, offset, length)?;
        Ok(data[offset as usize..(offset + length) as usize].to_vec())
    }

    fn concat(&self, parts: &[String], target: &str) -> Result<()> {
        check_name(target)?;
        let mut files = self.files.write().unwrap();
        let mut merged = Vec::new();
        for p in parts {
            merged.extend_from_slice(&files.get(p).ok_or_else(|| not_found(p))?.data);
        }
        for p in parts {
            files.remove(p);
        }
        files.insert(
            target.to_string(),
            MemFile {
                data: Arc::new(merged),
                modified: SystemTime::now(),
            },
        );
        Ok(())
    }

    fn list(&self) -> Result<Vec<String>> {
        Ok(self.files.read().unwrap().keys().cloned().collect())
    }

    fn stat(&self, name: &str) -> Result<FileStat> {
        let files = self.files.read().unwrap();
        let f = files.get(name).ok_or_else(|| not_found(name))?;
        Ok(FileStat {
            len: f.data.len() as u64,
            last_modified: f.modified,
        })
    }

    fn delete(&self, name: &str) -> Result<()> {
        self.files
            .write()
            .unwrap()
            .remove(name)
            .map(|_| ())
            .ok_or_else(|| not_found(name))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    #[test]
    fn short_read_names_file_and_offset() {
        let b = MemoryBackend::new();
        b.write_file("f", &[1, 2, 3]).unwrap();
        match b.read_range("f", 2, 5) {
            Err(Error::Read { file, offset, .. }) => {
                assert_eq!(file, "f");
                assert_eq!(offset, 2);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(b.read_range("g", 0, 1), Err(Error::Read { .. })));
    }
}
