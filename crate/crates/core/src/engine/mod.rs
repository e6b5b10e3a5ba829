//! Asynchronous save and load pipelines for one simulated rank.

mod load;
mod save;

use std::collections::BTreeMap;
use std::sync::{Arc, Condvar, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::Span;
use crate::storage::RetryPolicy;

pub use load::{execute_load, LoadContext, LoadedShards};
pub use save::{execute_save, RankOutcome, RankSaveHandle, SaveContext, SaveInput};

/// Stages that accept injected latency.
pub const STAGES: &[&str] = &[
    "snapshot",
    "serialize",
    "dump",
    "upload",
    "read",
    "deserialize",
    "copy",
    "exchange",
];

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageCost {
    #[serde(default)]
    pub fixed_ms: f64,
    #[serde(default)]
    pub per_mib_ms: f64,
}

/// Injected per-stage delay: `fixed_ms + per_mib_ms * MiB` for every item
/// passing through the stage.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StageLatency {
    stages: BTreeMap<String, StageCost>,
}

impl StageLatency {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn with(mut self, stage: &str, fixed_ms: f64, per_mib_ms: f64) -> Self {
        self.stages.insert(stage.to_string(), StageCost { fixed_ms, per_mib_ms });
        self
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let lat: Self = serde_json::from_slice(bytes).map_err(|e| Error::Config(format!("latency file: {e}")))?;
        lat.validate()?;
        Ok(lat)
    }

    pub fn validate(&self) -> Result<()> {
        for (stage, c) in &self.stages {
            if !STAGES.contains(&stage.as_str()) {
                return Err(Error::Config(format!(
                    "unknown stage `{stage}`; expected one of {}",
                    STAGES.join(", ")
                )));
            }
            if !(c.fixed_ms >= 0.0 && c.per_mib_ms >= 0.0 && c.fixed_ms.is_finite() && c.per_mib_ms.is_finite()) {
                return Err(Error::Config(format!("stage `{stage}` has a negative or non-finite latency")));
            }
        }
        Ok(())
    }

    pub fn cost(&self, stage: &str, bytes: u64) -> Duration {
        let Some(c) = self.stages.get(stage) else {
            return Duration::ZERO;
        };
        let ms = c.fixed_ms + c.per_mib_ms * bytes as f64 / (1024.0 * 1024.0);
        Duration::from_secs_f64(ms / 1e3)
    }

    pub fn apply(&self, stage: &str, bytes: u64) {
        let d = self.cost(stage, bytes);
        if !d.is_zero() {
            wait_precisely(d);
        }
    }
}

/// Sleeps for `d` without the usual timer overshoot: the tail is spent
/// yielding until the deadline so injected costs stay accurate.
fn wait_precisely(d: Duration) {
    const SLACK: Duration = Duration::from_micros(250);
    let deadline = Instant::now() + d;
    if d > SLACK {
        thread::sleep(d - SLACK);
    }
    while Instant::now() < deadline {
        thread::yield_now();
    }
}

#[derive(Debug, Clone)]
pub struct EngineConfig {
    pub read_workers: usize,
    pub serialize_workers: usize,
    pub upload_workers: usize,
    /// Depth of the bounded hand-off queues between background stages.
    pub queue_depth: usize,
    pub retry: RetryPolicy,
    pub latency: StageLatency,
    /// Extra delay added once to a rank's uploads (slow-rank injection).
    pub rank_upload_delay: BTreeMap<u32, Duration>,
    pub exchange_deadline: Duration,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            read_workers: 4,
            serialize_workers: 4,
            upload_workers: 2,
            queue_depth: 8,
            retry: RetryPolicy::default(),
            latency: StageLatency::zero(),
            rank_upload_delay: BTreeMap::new(),
            exchange_deadline: Duration::from_secs(30),
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.read_workers == 0 || self.serialize_workers == 0 || self.upload_workers == 0 || self.queue_depth == 0 {
            return Err(Error::Config("worker counts and queue depth must be at least 1".into()));
        }
        self.latency.validate()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct PipelineReport {
    pub spans: Vec<Span>,
    /// Time the caller was blocked before control returned.
    pub blocking_time: Duration,
    /// Time until the checkpoint was resolved (save) or fully loaded (load).
    pub end_to_end: Duration,
}

impl PipelineReport {
    pub fn phase_total(&self, phase: &str) -> Duration {
        self.spans.iter().filter(|s| s.phase == phase).map(Span::duration).sum()
    }
}

#[derive(Debug)]
struct PoolState {
    busy: [bool; 2],
    next: usize,
}

/// Two alternating snapshot buffers per rank. A save holds one buffer from
/// snapshot until its last upload lands, so a third overlapping save waits.
#[derive(Debug)]
pub struct SnapshotPool {
    state: Mutex<PoolState>,
    cv: Condvar,
}

impl Default for SnapshotPool {
    fn default() -> Self {
        Self::new()
    }
}

impl SnapshotPool {
    pub fn new() -> Self {
        Self {
            state: Mutex::new(PoolState {
                busy: [false; 2],
                next: 0,
            }),
            cv: Condvar::new(),
        }
    }

    /// Blocks until a buffer is free; prefers the one not used last.
    pub fn acquire(self: &Arc<Self>) -> BufferLease {
        let mut st = self.state.lock().unwrap();
        loop {
            let pick = [st.next, 1 - st.next].into_iter().find(|&i| !st.busy[i]);
            if let Some(i) = pick {
                st.busy[i] = true;
                st.next = 1 - i;
                return BufferLease {
                    pool: self.clone(),
                    index: i,
                };
            }
            st = self.cv.wait(st).unwrap();
        }
    }

    pub fn in_use(&self) -> usize {
        self.state.lock().unwrap().busy.iter().filter(|b| **b).count()
    }
}

/// Exclusive use of one snapshot buffer; released on drop.
#[derive(Debug)]
pub struct BufferLease {
    pool: Arc<SnapshotPool>,
    index: usize,
}

impl BufferLease {
    pub fn index(&self) -> usize {
        self.index
    }
}

impl Drop for BufferLease {
    fn drop(&mut self) {
        self.pool.state.lock().unwrap().busy[self.index] = false;
        self.pool.cv.notify_all();
    }
}
