//! Asynchronous integrity barrier.
//!
//! Ranks report the outcome of their part of a checkpoint and move on; a
//! coordinator thread resolves the checkpoint exactly once and only then
//! publishes the `COMPLETE` marker.

use std::sync::{Arc, Condvar, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use crossbeam_channel::{unbounded, Receiver, RecvTimeoutError, Sender};
use serde::{Deserialize, Serialize};

use crate::comm::Comm;
use crate::error::{Error, Result};
use crate::storage::StorageBackend;

pub const COMPLETE_MARKER: &str = "COMPLETE";
pub const FAILURE_LOG: &str = ".failures";
pub const DEFAULT_DEADLINE: Duration = Duration::from_secs(30);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailureRecord {
    pub checkpoint_id: String,
    pub rank: u32,
    /// Pipeline stage that failed (e.g. `upload`).
    pub stage: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Resolution {
    Complete,
    Incomplete(Vec<FailureRecord>),
    Timeout { missing: Vec<u32> },
}

impl Resolution {
    pub fn is_complete(&self) -> bool {
        matches!(self, Resolution::Complete)
    }
}

/// State the coordinator tracks for one checkpoint.
#[derive(Debug, Clone)]
pub struct BarrierTicket {
    pub checkpoint_id: String,
    /// `None` until the rank reports; `Some(true)` on success.
    pub flags: Vec<Option<bool>>,
    pub deadline: Duration,
    pub failures: Vec<FailureRecord>,
}

impl BarrierTicket {
    pub fn new(checkpoint_id: impl Into<String>, world_size: u32, deadline: Duration) -> Self {
        Self {
            checkpoint_id: checkpoint_id.into(),
            flags: vec![None; world_size as usize],
            deadline,
            failures: Vec::new(),
        }
    }

    fn pending(&self) -> Vec<u32> {
        self.flags
            .iter()
            .enumerate()
            .filter(|(_, f)| f.is_none())
            .map(|(r, _)| r as u32)
            .collect()
    }
}

type Report = (u32, std::result::Result<(), (String, String)>);

/// Per-rank handle used to report completion.
#[derive(Debug, Clone)]
pub struct BarrierReporter {
    tx: Sender<Report>,
    comm: Arc<Comm>,
}

impl BarrierReporter {
    pub fn success(&self, rank: u32) {
        self.send(rank, Ok(()));
    }

    pub fn failure(&self, rank: u32, stage: &str, reason: &str) {
        self.send(rank, Err((stage.to_string(), reason.to_string())));
    }

    fn send(&self, rank: u32, outcome: std::result::Result<(), (String, String)>) {
        if rank != 0 {
            self.comm.count_barrier_message();
        }
        // the coordinator may already have resolved on timeout
        let _ = self.tx.send((rank, outcome));
    }
}

#[derive(Debug, Default)]
struct Slot {
    resolution: Option<Resolution>,
    resolved_at: Option<Instant>,
}

/// Observer of a barrier's single resolution.
#[derive(Debug, Clone)]
pub struct BarrierHandle {
    checkpoint_id: String,
    slot: Arc<(Mutex<Slot>, Condvar)>,
}

impl BarrierHandle {
    pub fn checkpoint_id(&self) -> &str {
        &self.checkpoint_id
    }

    pub fn wait(&self) -> Resolution {
        let (lock, cv) = &*self.slot;
        let guard = cv
            .wait_while(lock.lock().unwrap(), |s| s.resolution.is_none())
            .unwrap();
        guard.resolution.clone().expect("resolved")
    }

    pub fn try_resolution(&self) -> Option<Resolution> {
        self.slot.0.lock().unwrap().resolution.clone()
    }

    pub fn resolved_at(&self) -> Option<Instant> {
        self.slot.0.lock().unwrap().resolved_at
    }
}

/// Work run by the coordinator right before the marker is written
/// (typically persisting the global metadata file).
pub type Finalizer = Box<dyn FnOnce(&dyn StorageBackend) -> Result<()> + Send>;

/// Starts the coordinator for `ticket` and returns the reporter shared by
/// all ranks plus a handle to the eventual resolution.
pub fn async_barrier(
    ticket: BarrierTicket,
    comm: Arc<Comm>,
    backend: Arc<dyn StorageBackend>,
    finalize: Finalizer,
) -> (BarrierReporter, BarrierHandle) {
    let (tx, rx) = unbounded();
    let slot = Arc::new((Mutex::new(Slot::default()), Condvar::new()));
    let handle = BarrierHandle {
        checkpoint_id: ticket.checkpoint_id.clone(),
        slot: slot.clone(),
    };
    thread::spawn(move || {
        let resolution = coordinate(ticket, rx, backend.as_ref(), finalize);
        let (lock, cv) = &*slot;
        let mut s = lock.lock().unwrap();
        s.resolution = Some(resolution);
        s.resolved_at = Some(Instant::now());
        cv.notify_all();
    });
    (BarrierReporter { tx, comm }, handle)
}

fn coordinate(
    mut ticket: BarrierTicket,
    rx: Receiver<Report>,
    backend: &dyn StorageBackend,
    finalize: Finalizer,
) -> Resolution {
    let deadline = Instant::now() + ticket.deadline;
    while !ticket.pending().is_empty() {
        let left = deadline.saturating_duration_since(Instant::now());
        match rx.recv_timeout(left) {
            Ok((rank, outcome)) => {
                let Some(flag) = ticket.flags.get_mut(rank as usize) else { continue };
                if flag.is_some() {
                    continue;
                }
                *flag = Some(outcome.is_ok());
                if let Err((stage, reason)) = outcome {
                    ticket.failures.push(FailureRecord {
                        checkpoint_id: ticket.checkpoint_id.clone(),
                        rank,
                        stage,
                        reason,
                    });
                }
            }
            Err(RecvTimeoutError::Timeout) | Err(RecvTimeoutError::Disconnected) => {
                let missing = ticket.pending();
                let mut records = ticket.failures.clone();
                records.extend(missing.iter().map(|&rank| FailureRecord {
                    checkpoint_id: ticket.checkpoint_id.clone(),
                    rank,
                    stage: "barrier".into(),
                    reason: "no report before deadline".into(),
                }));
                write_failure_log(backend, &records);
                return Resolution::Timeout { missing };
            }
        }
    }
    if !ticket.failures.is_empty() {
        ticket.failures.sort_by_key(|f| f.rank);
        write_failure_log(backend, &ticket.failures);
        return Resolution::Incomplete(ticket.failures);
    }
    let published = finalize(backend).and_then(|()| backend.write_file(COMPLETE_MARKER, ticket.checkpoint_id.as_bytes()));
    match published {
        Ok(()) => Resolution::Complete,
        Err(e) => {
            let records = vec![FailureRecord {
                checkpoint_id: ticket.checkpoint_id.clone(),
                rank: 0,
                stage: "finalize".into(),
                reason: e.to_string(),
            }];
            write_failure_log(backend, &records);
            Resolution::Incomplete(records)
        }
    }
}

fn write_failure_log(backend: &dyn StorageBackend, records: &[FailureRecord]) {
    let mut out = Vec::new();
    for r in records {
        out.extend(serde_json::to_vec(r).expect("failure record serializes"));
        out.push(b'\n');
    }
    // best effort: the resolution itself already carries the records
    let _ = backend.write_file(FAILURE_LOG, &out);
}

pub fn read_failure_log(backend: &dyn StorageBackend) -> Vec<FailureRecord> {
    backend
        .read_file(FAILURE_LOG)
        .map(|bytes| {
            bytes
                .split(|b| *b == b'\n')
                .filter(|l| !l.is_empty())
                .filter_map(|l| serde_json::from_slice(l).ok())
                .collect()
        })
        .unwrap_or_default()
}

/// Refuses checkpoints that never reached a complete resolution.
pub fn ensure_complete(backend: &dyn StorageBackend, location: &str) -> Result<()> {
    if backend.exists(COMPLETE_MARKER) {
        return Ok(());
    }
    let failures = read_failure_log(backend);
    let id = failures
        .first()
        .map(|f| f.checkpoint_id.clone())
        .unwrap_or_else(|| location.to_string());
    let detail = failures
        .iter()
        .map(|f| format!("rank {} failed at {}: {}", f.rank, f.stage, f.reason))
        .collect::<Vec<_>>()
        .join("; ");
    Err(Error::Integrity(if detail.is_empty() {
        format!("checkpoint `{id}` has no {COMPLETE_MARKER} marker")
    } else {
        format!("checkpoint `{id}` is incomplete ({detail})")
    }))
}
