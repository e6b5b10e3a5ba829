use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use crossbeam_channel::{bounded, unbounded, Receiver, Sender};

use super::{EngineConfig, SnapshotPool};
use crate::barrier::BarrierReporter;
use crate::error::{Error, Result};
use crate::metadata::ShardMeta;
use crate::metrics::{Recorder, SpanGuard};
use crate::planner::{BlobItem, SavePlan};
use crate::storage::{part_name, StorageBackend};

/// What one rank hands to the save pipeline.
#[derive(Debug, Clone, Copy)]
pub struct SaveInput<'a> {
    pub plan: &'a SavePlan,
    /// The rank's live tensor state, keyed by shard.
    pub tensors: &'a BTreeMap<ShardMeta, Vec<u8>>,
    /// Encoded opaque state keyed by file name (extra state, loader files).
    pub blobs: &'a BTreeMap<String, Vec<u8>>,
}

#[derive(Debug, Clone)]
pub struct SaveContext {
    pub checkpoint_id: String,
    pub backend: Arc<dyn StorageBackend>,
    pub config: Arc<EngineConfig>,
    pub pool: Arc<SnapshotPool>,
    pub recorder: Arc<Recorder>,
    /// Receives this rank's final outcome, if a barrier is running.
    pub reporter: Option<BarrierReporter>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RankOutcome {
    pub rank: u32,
    pub finished_at: Instant,
    /// Failing stage and reason.
    pub failure: Option<(String, String)>,
    /// Storage write attempts, retries included.
    pub attempts: u32,
}

/// Returned once the rank's snapshot is taken; the rest runs in background.
#[derive(Debug)]
pub struct RankSaveHandle {
    pub rank: u32,
    pub started_at: Instant,
    pub blocking_time: Duration,
    finisher: JoinHandle<RankOutcome>,
}

impl RankSaveHandle {
    pub fn wait(self) -> RankOutcome {
        self.finisher.join().expect("save finisher panicked")
    }

    pub fn is_finished(&self) -> bool {
        self.finisher.is_finished()
    }
}

struct Job {
    file: String,
    /// Part index for tensor items; `None` for whole-file blobs.
    part: Option<usize>,
    bytes: Arc<Vec<u8>>,
    phase: &'static str,
    label: String,
}

type Failure = Arc<Mutex<Option<(String, String)>>>;
/// Part bytes kept for backends without concat, keyed by (file, part).
type Staged = Mutex<BTreeMap<(String, usize), Arc<Vec<u8>>>>;

fn fail(slot: &Failure, stage: &str, reason: String) {
    slot.lock().unwrap().get_or_insert((stage.to_string(), reason));
}

/// Runs one rank's save. Blocks only for the snapshot; serialize, dump and
/// upload then drain in background threads and the outcome is reported to
/// the barrier.
pub fn execute_save(input: SaveInput<'_>, ctx: SaveContext) -> Result<RankSaveHandle> {
    let SaveInput { plan, tensors, blobs } = input;
    let rank = plan.rank;
    let cfg = ctx.config.clone();
    cfg.validate()?;
    for blob in &plan.blobs {
        if !blobs.contains_key(blob.file_name()) {
            return Err(Error::Precondition(format!("rank {rank} has no bytes for `{}`", blob.file_name())));
        }
    }
    for item in &plan.items {
        if !tensors.contains_key(&item.shard) {
            return Err(Error::Precondition(format!("rank {rank} does not hold {}", item.shard)));
        }
    }

    let started_at = Instant::now();
    let rec = ctx.recorder.clone();
    let id = ctx.checkpoint_id.clone();
    let tag = |g: SpanGuard| g.attr("checkpoint_id", &id);
    let rank_span = tag(rec.span(rank, "save"));

    let lease = ctx.pool.acquire();
    let buffer = lease.index();
    let failure: Failure = Arc::new(Mutex::new(None));
    let attempts = Arc::new(AtomicU32::new(0));
    let supports_concat = ctx.backend.capabilities().supports_concat;
    let staged: Arc<Staged> = Arc::default();

    let (snap_tx, snap_rx) = unbounded::<Job>();
    let (ser_tx, ser_rx) = bounded::<Job>(cfg.queue_depth);
    let (dump_tx, dump_rx) = bounded::<Job>(cfg.queue_depth);

    // Stage threads are started off the caller's thread so that only the
    // snapshot copies count as blocking time.
    let launcher = {
        let (rec, cfg, id, staged) = (rec.clone(), cfg.clone(), id.clone(), staged.clone());
        let (failure, attempts, backend) = (failure.clone(), attempts.clone(), ctx.backend.clone());
        thread::spawn(move || {
            let mut workers = Vec::new();
            for _ in 0..cfg.serialize_workers {
                let (rx, tx, rec, cfg, id) = (snap_rx.clone(), ser_tx.clone(), rec.clone(), cfg.clone(), id.clone());
                workers.push(thread::spawn(move || {
                    stage_loop(rx, tx, |job| {
                        let _s = rec.span(rank, "serialize").bytes(job.bytes.len() as u64).attr("checkpoint_id", &id);
                        cfg.latency.apply("serialize", job.bytes.len() as u64);
                    })
                }));
            }
            drop((snap_rx, ser_tx));
            for _ in 0..cfg.serialize_workers {
                let (rx, tx, rec, cfg, id, staged) = (
                    ser_rx.clone(),
                    dump_tx.clone(),
                    rec.clone(),
                    cfg.clone(),
                    id.clone(),
                    staged.clone(),
                );
                workers.push(thread::spawn(move || {
                    stage_loop(rx, tx, |job| {
                        let _s = rec.span(rank, "dump").bytes(job.bytes.len() as u64).attr("checkpoint_id", &id);
                        cfg.latency.apply("dump", job.bytes.len() as u64);
                        if let (false, Some(p)) = (supports_concat, job.part) {
                            staged.lock().unwrap().insert((job.file.clone(), p), job.bytes.clone());
                        }
                    })
                }));
            }
            drop((ser_rx, dump_tx));
            let mut uploaders = Vec::new();
            for _ in 0..cfg.upload_workers {
                let (rx, rec, cfg, id) = (dump_rx.clone(), rec.clone(), cfg.clone(), id.clone());
                let (backend, failure, attempts) = (backend.clone(), failure.clone(), attempts.clone());
                uploaders.push(thread::spawn(move || {
                    for job in rx {
                        let _s = rec
                            .span(rank, job.phase)
                            .bytes(job.bytes.len() as u64)
                            .attr("checkpoint_id", &id)
                            .attr("file", &job.file)
                            .attr("buffer", buffer);
                        cfg.latency.apply("upload", job.bytes.len() as u64);
                        let target = match job.part {
                            Some(p) if supports_concat => part_name(&job.file, p),
                            Some(_) => continue,
                            None => job.file.clone(),
                        };
                        let (res, n) = cfg.retry.run(|| backend.write_file(&target, &job.bytes));
                        attempts.fetch_add(n, Ordering::Relaxed);
                        if let Err(e) = res {
                            fail(&failure, job.phase, format!("{} ({}): {e}", target, job.label));
                        }
                    }
                }));
            }
            drop(dump_rx);
            (workers, uploaders)
        })
    };

    // Snapshot: the only part the caller waits for.
    let mut parts: BTreeMap<String, usize> = BTreeMap::new();
    parts.insert(plan.model_file.clone(), 0);
    parts.insert(plan.optim_file.clone(), 0);
    for item in &plan.items {
        let src = &tensors[&item.shard];
        let _s = tag(rec.span(rank, "snapshot"))
            .bytes(src.len() as u64)
            .attr("buffer", buffer);
        cfg.latency.apply("snapshot", src.len() as u64);
        let file = plan.file_for(item.source).to_string();
        let counter = parts.get_mut(&file).expect("tensor file registered");
        let job = Job {
            file,
            part: Some(*counter),
            bytes: Arc::new(src.clone()),
            phase: "upload",
            label: item.shard.to_string(),
        };
        *counter += 1;
        snap_tx.send(job).expect("serialize workers alive");
    }
    for blob in &plan.blobs {
        let bytes = &blobs[blob.file_name()];
        let _s = tag(rec.span(rank, "snapshot"))
            .bytes(bytes.len() as u64)
            .attr("buffer", buffer);
        let phase = match blob {
            BlobItem::Extra { .. } => "upload",
            _ => "loader_upload",
        };
        snap_tx
            .send(Job {
                file: blob.file_name().to_string(),
                part: None,
                bytes: Arc::new(bytes.clone()),
                phase,
                label: format!("{:?}", blob.source()),
            })
            .expect("serialize workers alive");
    }
    drop(snap_tx);
    let blocking_time = started_at.elapsed();

    let finisher = thread::spawn(move || {
        let (workers, uploaders) = launcher.join().expect("stage launcher panicked");
        for w in workers {
            w.join().expect("stage worker panicked");
        }
        for u in uploaders {
            u.join().expect("upload worker panicked");
        }
        if let Some(d) = cfg.rank_upload_delay.get(&rank) {
            thread::sleep(*d);
        }
        if failure.lock().unwrap().is_none() {
            if let Err((stage, reason)) = assemble(rank, &ctx, &cfg, &parts, supports_concat, &staged, &attempts) {
                fail(&failure, stage, reason);
            }
        }
        drop(lease);
        drop(rank_span);
        let failure = failure.lock().unwrap().clone();
        if let Some(rep) = &ctx.reporter {
            match &failure {
                None => rep.success(rank),
                Some((stage, reason)) => rep.failure(rank, stage, reason),
            }
        }
        RankOutcome {
            rank,
            finished_at: Instant::now(),
            failure,
            attempts: attempts.load(Ordering::Relaxed),
        }
    });

    Ok(RankSaveHandle {
        rank,
        started_at,
        blocking_time,
        finisher,
    })
}

fn stage_loop(rx: Receiver<Job>, tx: Sender<Job>, mut work: impl FnMut(&Job)) {
    for job in rx {
        work(&job);
        if tx.send(job).is_err() {
            return;
        }
    }
}

/// Turns uploaded parts into the rank's final tensor files.
fn assemble(
    rank: u32,
    ctx: &SaveContext,
    cfg: &EngineConfig,
    parts: &BTreeMap<String, usize>,
    supports_concat: bool,
    staged: &Staged,
    attempts: &AtomicU32,
) -> std::result::Result<(), (&'static str, String)> {
    let backend = &ctx.backend;
    for (file, &n) in parts {
        let _s = ctx
            .recorder
            .span(rank, "concat")
            .attr("checkpoint_id", &ctx.checkpoint_id)
            .attr("file", file);
        let (res, tries) = if n == 0 {
            cfg.retry.run(|| backend.write_file(file, &[]))
        } else if supports_concat {
            let names: Vec<String> = (0..n).map(|i| part_name(file, i)).collect();
            cfg.retry.run(|| backend.concat(&names, file))
        } else {
            let staged = staged.lock().unwrap();
            let mut whole = Vec::new();
            for i in 0..n {
                whole.extend_from_slice(&staged[&(file.clone(), i)]);
            }
            cfg.retry.run(|| backend.write_file(file, &whole))
        };
        attempts.fetch_add(tries, Ordering::Relaxed);
        res.map_err(|e| ("concat", format!("{file}: {e}")))?;
    }
    Ok(())
}
