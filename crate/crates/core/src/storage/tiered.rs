use std::collections::BTreeMap;
use std::sync::{Arc, RwLock};
use std::time::{Duration, SystemTime};

use super::{before, not_found, open_backend, Capabilities, FileStat, StorageBackend};
use crate::error::{Error, Result};

/// Path-mapping table persisted alongside the hot files.
const MAP_FILE: &str = ".tiermap";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TierConfig {
    pub hot_root: String,
    pub cold_root: String,
    pub retention_threshold: Duration,
}

impl TierConfig {
    pub fn validate(&self) -> Result<()> {
        let norm = |s: &str| s.trim_end_matches('/').to_string();
        let (h, c) = (norm(&self.hot_root), norm(&self.cold_root));
        if h == c || h.starts_with(&format!("{c}/")) || c.starts_with(&format!("{h}/")) {
            return Err(Error::Config(format!(
                "hot root `{}` and cold root `{}` must be disjoint",
                self.hot_root, self.cold_root
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MigrationReport {
    pub migrated: Vec<String>,
    pub failed: Vec<(String, String)>,
}

impl MigrationReport {
    pub fn is_empty(&self) -> bool {
        self.migrated.is_empty() && self.failed.is_empty()
    }
}

/// Two-tier store: files are written hot and later cooled down to the cold
/// tier; the original names keep resolving through the mapping table.
#[derive(Debug)]
pub struct TieredBackend {
    hot: Arc<dyn StorageBackend>,
    cold: Arc<dyn StorageBackend>,
    retention: Duration,
    mapping: RwLock<BTreeMap<String, String>>,
}

impl TieredBackend {
    pub fn open(cfg: &TierConfig) -> Result<Self> {
        cfg.validate()?;
        Self::new(open_backend(&cfg.hot_root)?, open_backend(&cfg.cold_root)?, cfg.retention_threshold)
    }

    pub fn new(hot: Arc<dyn StorageBackend>, cold: Arc<dyn StorageBackend>, retention: Duration) -> Result<Self> {
        let mapping = match hot.read_file(MAP_FILE) {
            Ok(bytes) => serde_json::from_slice(&bytes).map_err(|e| Error::Codec(format!("{MAP_FILE}: {e}")))?,
            Err(_) => BTreeMap::new(),
        };
        Ok(Self {
            hot,
            cold,
            retention,
            mapping: RwLock::new(mapping),
        })
    }

    pub fn hot(&self) -> &Arc<dyn StorageBackend> {
        &self.hot
    }

    pub fn cold(&self) -> &Arc<dyn StorageBackend> {
        &self.cold
    }

    pub fn is_cold(&self, name: &str) -> bool {
        self.mapping.read().unwrap().contains_key(name)
    }

    fn persist_mapping(&self, mapping: &BTreeMap<String, String>) -> Result<()> {
        let bytes = serde_json::to_vec(mapping).expect("string map serializes");
        self.hot.write_file(MAP_FILE, &bytes)
    }

    fn resolve(&self, name: &str) -> (&Arc<dyn StorageBackend>, String) {
        match self.mapping.read().unwrap().get(name) {
            Some(cold_name) => (&self.cold, cold_name.clone()),
            None => (&self.hot, name.to_string()),
        }
    }

    /// Moves every hot file last modified before `now - retention` to the
    /// cold tier. A hot copy is only removed after the cold copy reads back
    /// bit-identical.
    pub fn cool_down(&self, now: SystemTime) -> Result<MigrationReport> {
        let cutoff = before(now, self.retention);
        let mut report = MigrationReport::default();
        for name in self.hot.list()? {
            if name == MAP_FILE {
                continue;
            }
            let stat = self.hot.stat(&name)?;
            if stat.last_modified >= cutoff {
                continue;
            }
            let migrated = (|| -> Result<()> {
                let bytes = self.hot.read_file(&name)?;
                self.cold.write_file(&name, &bytes)?;
                if self.cold.read_file(&name)? != bytes {
                    return Err(Error::Integrity(format!("cold copy of `{name}` differs")));
                }
                Ok(())
            })();
            match migrated {
                Ok(()) => {
                    let mut mapping = self.mapping.write().unwrap();
                    mapping.insert(name.clone(), name.clone());
                    self.persist_mapping(&mapping)?;
                    drop(mapping);
                    self.hot.delete(&name)?;
                    report.migrated.push(name);
                }
                Err(e) => report.failed.push((name, e.to_string())),
            }
        }
        Ok(report)
    }
}

pub fn cool_down(tiered: &TieredBackend, now: SystemTime) -> Result<MigrationReport> {
    tiered.cool_down(now)
}

impl StorageBackend for TieredBackend {
    fn capabilities(&self) -> Capabilities {
        let (h, c) = (self.hot.capabilities(), self.cold.capabilities());
        Capabilities {
            supports_range_read: h.supports_range_read && c.supports_range_read,
            supports_concat: h.supports_concat,
        }
    }

    fn write_file(&self, name: &str, bytes: &[u8]) -> Result<()> {
        self.hot.write_file(name, bytes)?;
        let mut mapping = self.mapping.write().unwrap();
        if mapping.remove(name).is_some() {
            self.persist_mapping(&mapping)?;
        }
        Ok(())
    }

    fn read_range(&self, name: &str, offset: u64, length: u64) -> Result<Vec<u8>> {
        let (b, n) = self.resolve(name);
        b.read_range(&n, offset, length)
    }

    fn concat(&self, parts: &[String], target: &str) -> Result<()> {
        self.hot.concat(parts, target)?;
        let mut mapping = self.mapping.write().unwrap();
        if mapping.remove(target).is_some() {
            self.persist_mapping(&mapping)?;
        }
        Ok(())
    }

    fn list(&self) -> Result<Vec<String>> {
        let mut names: Vec<String> = self.hot.list()?.into_iter().filter(|n| n != MAP_FILE).collect();
        names.extend(self.mapping.read().unwrap().keys().cloned());
        names.sort();
        names.dedup();
        Ok(names)
    }

    fn stat(&self, name: &str) -> Result<FileStat> {
        let (b, n) = self.resolve(name);
        b.stat(&n)
    }

    fn delete(&self, name: &str) -> Result<()> {
        let mut mapping = self.mapping.write().unwrap();
        match mapping.remove(name) {
            Some(cold_name) => {
                self.persist_mapping(&mapping)?;
                self.cold.delete(&cold_name)
            }
            None if self.hot.exists(name) => self.hot.delete(name),
            None => Err(not_found(name)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::storage::{FaultyBackend, MemoryBackend};

    fn t(secs: u64) -> SystemTime {
        SystemTime::UNIX_EPOCH + Duration::from_secs(secs)
    }

    fn setup(retention: u64) -> (Arc<MemoryBackend>, Arc<MemoryBackend>, TieredBackend) {
        let hot = Arc::new(MemoryBackend::new());
        let cold = Arc::new(MemoryBackend::new());
        let tiered = TieredBackend::new(hot.clone(), cold.clone(), Duration::from_secs(retention)).unwrap();
        (hot, cold, tiered)
    }

    #[test]
    fn nothing_stale_nothing_moves() {
        let (hot, _, tiered) = setup(100);
        tiered.write_file("a", b"1").unwrap();
        hot.set_modified("a", t(950)).unwrap();
        assert!(tiered.cool_down(t(1000)).unwrap().is_empty());
        assert!(!tiered.is_cold("a"));
    }

    #[test]
    fn stale_file_moves_and_keeps_its_path() {
        let (hot, cold, tiered) = setup(100);
        tiered.write_file("old", b"payload").unwrap();
        tiered.write_file("new", b"fresh").unwrap();
        hot.set_modified("old", t(100)).unwrap();
        hot.set_modified("new", t(990)).unwrap();
        let rep = tiered.cool_down(t(1000)).unwrap();
        assert_eq!(rep.migrated, vec!["old".to_string()]);
        assert!(!hot.exists("old"));
        assert_eq!(cold.read_file("old").unwrap(), b"payload");
        assert_eq!(tiered.read_file("old").unwrap(), b"payload");
        assert_eq!(tiered.list().unwrap(), vec!["new".to_string(), "old".to_string()]);
        // idempotent for the same `now`
        assert!(tiered.cool_down(t(1000)).unwrap().is_empty());
    }

    #[test]
    fn zero_threshold_moves_everything() {
        let (hot, _, tiered) = setup(0);
        for n in ["a", "b", "c"] {
            tiered.write_file(n, n.as_bytes()).unwrap();
            hot.set_modified(n, t(10)).unwrap();
        }
        assert_eq!(tiered.cool_down(t(11)).unwrap().migrated.len(), 3);
        assert_eq!(tiered.read_file("b").unwrap(), b"b");
    }

    #[test]
    fn failed_copy_stays_hot() {
        let hot = Arc::new(MemoryBackend::new());
        let cold = Arc::new(FaultyBackend::new(MemoryBackend::new()));
        cold.fail_writes_permanently("x");
        let tiered = TieredBackend::new(hot.clone(), cold, Duration::ZERO).unwrap();
        tiered.write_file("x", b"keep").unwrap();
        hot.set_modified("x", t(1)).unwrap();
        let rep = tiered.cool_down(t(5)).unwrap();
        assert_eq!(rep.failed.len(), 1);
        assert_eq!(hot.read_file("x").unwrap(), b"keep");
    }

    #[test]
    fn mapping_survives_reopen() {
        let (hot, cold, tiered) = setup(0);
        tiered.write_file("f", b"v").unwrap();
        hot.set_modified("f", t(1)).unwrap();
        tiered.cool_down(t(2)).unwrap();
        let reopened = TieredBackend::new(hot, cold, Duration::ZERO).unwrap();
        assert_eq!(reopened.read_file("f").unwrap(), b"v");
    }

    #[test]
    fn overlapping_roots_rejected() {
        let cfg = TierConfig {
            hot_root: "file:///data/ckpt".into(),
            cold_root: "file:///data/ckpt/cold".into(),
            retention_threshold: Duration::ZERO,
        };
        assert!(cfg.validate().is_err());
    }
}
