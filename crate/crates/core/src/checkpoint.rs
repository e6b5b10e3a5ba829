//! Whole-job save and load over all simulated ranks.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use crate::barrier::{async_barrier, ensure_complete, BarrierHandle, BarrierTicket, Resolution, DEFAULT_DEADLINE};
use crate::comm::Comm;
use crate::engine::{
    execute_load, execute_save, EngineConfig, LoadContext, PipelineReport, RankOutcome, RankSaveHandle, SaveContext,
    SaveInput, SnapshotPool,
};
use crate::error::{Error, Result};
use crate::loader::{
    reshard_loader, synthetic_replicated_state, synthetic_sharded_state, ReplicatedLoaderState, ShardedLoaderState,
    REPLICATED_LOADER_FILE,
};
use crate::metadata::{
    decode_metadata, encode_metadata, validate_coverage, ByteMeta, GlobalMetadata, ShardMeta, METADATA_FILE,
};
use crate::metrics::Recorder;
use crate::planner::{coordinate_load, coordinate_save, extra_file_name, plan_with_cache, LoadPlan, PlanCache};
use crate::sharding::{all_layouts, materialize_shard, ModelSpec, RankLayout, ShardingSpec};
use crate::storage::StorageBackend;

/// Model description stored next to the metadata so loads need no side input.
pub const MODEL_FILE: &str = "model.json";

/// Everything one rank contributes to a checkpoint.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RankState {
    pub rank: u32,
    pub tensors: BTreeMap<ShardMeta, Vec<u8>>,
    pub loader: Option<ShardedLoaderState>,
    /// Opaque per-rank state (RNG and similar).
    pub extra: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingState {
    pub step: u64,
    pub ranks: Vec<RankState>,
    pub replicated: ReplicatedLoaderState,
}

impl TrainingState {
    /// Deterministic state of every rank of `spec` at `step`.
    pub fn synthetic(model: &ModelSpec, spec: &ShardingSpec, step: u64) -> Result<Self> {
        let layouts = all_layouts(model, spec)?;
        let ranks = layouts
            .iter()
            .map(|l| {
                let tensors = l
                    .all_shards()
                    .map(|(s, _)| Ok((s.clone(), materialize_shard(model, s)?)))
                    .collect::<Result<_>>()?;
                Ok(RankState {
                    rank: l.global_rank,
                    tensors,
                    loader: l
                        .holds_dataloader_state
                        .then(|| synthetic_sharded_state(model.seed, l.coords.dp_idx, step)),
                    extra: format!("rng:{}:{}", l.global_rank, step).into_bytes(),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            step,
            ranks,
            replicated: synthetic_replicated_state(),
        })
    }
}

#[derive(Debug, Clone)]
pub struct SaveOptions {
    pub checkpoint_id: String,
    pub use_cache: bool,
    pub barrier_deadline: Duration,
}

impl SaveOptions {
    pub fn new(checkpoint_id: impl Into<String>) -> Self {
        Self {
            checkpoint_id: checkpoint_id.into(),
            use_cache: true,
            barrier_deadline: DEFAULT_DEADLINE,
        }
    }
}

/// Drives saves for one model under one sharding spec. Keeps the plan cache
/// and each rank's snapshot buffers across saves.
#[derive(Debug)]
pub struct Checkpointer {
    model: ModelSpec,
    spec: ShardingSpec,
    layouts: Vec<RankLayout>,
    comm: Arc<Comm>,
    cache: PlanCache,
    pools: Vec<Arc<SnapshotPool>>,
    recorder: Arc<Recorder>,
    engine: Arc<EngineConfig>,
}

impl Checkpointer {
    pub fn new(model: ModelSpec, spec: ShardingSpec) -> Result<Self> {
        let layouts = all_layouts(&model, &spec)?;
        let world = spec.world_size();
        Ok(Self {
            model,
            spec,
            layouts,
            comm: Arc::new(Comm::for_world(world)),
            cache: PlanCache::new(),
            pools: (0..world).map(|_| Arc::new(SnapshotPool::new())).collect(),
            recorder: Arc::new(Recorder::new()),
            engine: Arc::new(EngineConfig::default()),
        })
    }

    pub fn with_engine(mut self, engine: EngineConfig) -> Result<Self> {
        engine.validate()?;
        self.engine = Arc::new(engine);
        Ok(self)
    }

    pub fn with_recorder(mut self, recorder: Arc<Recorder>) -> Self {
        self.recorder = recorder;
        self
    }

    pub fn with_comm(mut self, comm: Arc<Comm>) -> Self {
        self.comm = comm;
        self
    }

    pub fn model(&self) -> &ModelSpec {
        &self.model
    }

    pub fn spec(&self) -> &ShardingSpec {
        &self.spec
    }

    pub fn layouts(&self) -> &[RankLayout] {
        &self.layouts
    }

    pub fn comm(&self) -> &Arc<Comm> {
        &self.comm
    }

    pub fn recorder(&self) -> &Arc<Recorder> {
        &self.recorder
    }

    pub fn engine(&self) -> &EngineConfig {
        &self.engine
    }

    pub fn synthetic_state(&self, step: u64) -> Result<TrainingState> {
        TrainingState::synthetic(&self.model, &self.spec, step)
    }

    /// Starts a checkpoint. Returns once every rank's snapshot is taken; the
    /// upload stages and the integrity barrier finish in background.
    pub fn save(&mut self, state: &TrainingState, backend: Arc<dyn StorageBackend>, opts: &SaveOptions) -> Result<SaveHandle> {
        let started = Instant::now();
        let world = self.spec.world_size();
        if state.ranks.len() as u32 != world || state.ranks.iter().enumerate().any(|(i, r)| r.rank != i as u32) {
            return Err(Error::Precondition(format!("expected one state per rank 0..{world}")));
        }
        state.replicated.validate()?;
        let id = opts.checkpoint_id.clone();

        let plan_span = self.recorder.span(0, "plan").attr("checkpoint_id", &id);
        let (plans, mut meta, cache_hit) = if opts.use_cache {
            let c = plan_with_cache(&mut self.cache, &self.comm, &self.model, &self.layouts, &self.spec)?;
            (c.plans, c.metadata, c.cache_hit)
        } else {
            let (p, m) = coordinate_save(&self.comm, &self.layouts, &self.spec)?;
            (p, m, false)
        };
        drop(plan_span);

        let mut blobs: Vec<BTreeMap<String, Vec<u8>>> = Vec::with_capacity(world as usize);
        for (layout, rs) in self.layouts.iter().zip(&state.ranks) {
            let mut files = BTreeMap::new();
            files.insert(extra_file_name(rs.rank), rs.extra.clone());
            if layout.holds_dataloader_state {
                let loader = rs.loader.as_ref().ok_or_else(|| {
                    Error::Precondition(format!("rank {} must provide dataloader state", rs.rank))
                })?;
                let dp = layout.coords.dp_idx;
                if loader.dp_rank != dp {
                    return Err(Error::Precondition(format!(
                        "rank {} holds loader state of dp rank {}, expected {dp}",
                        rs.rank, loader.dp_rank
                    )));
                }
                let bytes = loader.encode();
                let name = crate::loader::loader_file_name(dp);
                meta.loader_map.insert(
                    dp,
                    ByteMeta {
                        file_name: name.clone(),
                        byte_offset: 0,
                        byte_length: bytes.len() as u64,
                    },
                );
                files.insert(name, bytes);
            }
            if rs.rank == 0 {
                files.insert(REPLICATED_LOADER_FILE.to_string(), state.replicated.encode());
                meta.replicated_loader_file = Some(REPLICATED_LOADER_FILE.to_string());
            }
            blobs.push(files);
        }

        let meta_bytes = encode_metadata(&meta);
        let model_bytes = self.model.to_canonical_json();
        let (reporter, barrier) = async_barrier(
            BarrierTicket::new(id.clone(), world, opts.barrier_deadline),
            self.comm.clone(),
            backend.clone(),
            Box::new(move |b: &dyn StorageBackend| {
                b.write_file(MODEL_FILE, &model_bytes)?;
                b.write_file(METADATA_FILE, &meta_bytes)
            }),
        );

        let launched: Vec<Result<RankSaveHandle>> = thread::scope(|s| {
            let workers: Vec<_> = state
                .ranks
                .iter()
                .zip(&blobs)
                .map(|(rs, files)| {
                    let plan = &plans[&rs.rank];
                    let ctx = SaveContext {
                        checkpoint_id: id.clone(),
                        backend: backend.clone(),
                        config: self.engine.clone(),
                        pool: self.pools[rs.rank as usize].clone(),
                        recorder: self.recorder.clone(),
                        reporter: Some(reporter.clone()),
                    };
                    s.spawn(move || {
                        execute_save(
                            SaveInput {
                                plan,
                                tensors: &rs.tensors,
                                blobs: files,
                            },
                            ctx,
                        )
                    })
                })
                .collect();
            workers.into_iter().map(|w| w.join().expect("snapshot thread panicked")).collect()
        });

        let mut ranks = Vec::with_capacity(launched.len());
        let mut first_error = None;
        for (rank, h) in launched.into_iter().enumerate() {
            match h {
                Ok(h) => ranks.push(h),
                Err(e) => {
                    reporter.failure(rank as u32, "snapshot", &e.to_string());
                    first_error.get_or_insert(e);
                }
            }
        }
        if let Some(e) = first_error {
            return Err(e);
        }
        Ok(SaveHandle {
            checkpoint_id: id,
            started,
            blocking_time: started.elapsed(),
            ranks,
            barrier,
            recorder: self.recorder.clone(),
            metadata: meta,
            cache_hit,
        })
    }
}

/// A checkpoint whose background stages may still be running.
#[derive(Debug)]
pub struct SaveHandle {
    pub checkpoint_id: String,
    started: Instant,
    blocking_time: Duration,
    ranks: Vec<RankSaveHandle>,
    barrier: BarrierHandle,
    recorder: Arc<Recorder>,
    metadata: GlobalMetadata,
    cache_hit: bool,
}

#[derive(Debug, Clone)]
pub struct SaveOutcome {
    pub resolution: Resolution,
    pub report: PipelineReport,
    pub ranks: Vec<RankOutcome>,
    pub metadata: GlobalMetadata,
    pub cache_hit: bool,
}

impl SaveHandle {
    pub fn blocking_time(&self) -> Duration {
        self.blocking_time
    }

    pub fn barrier(&self) -> &BarrierHandle {
        &self.barrier
    }

    /// Waits for every rank and for the barrier's resolution.
    pub fn wait(self) -> SaveOutcome {
        let ranks: Vec<RankOutcome> = self.ranks.into_iter().map(RankSaveHandle::wait).collect();
        let resolution = self.barrier.wait();
        let done = self.barrier.resolved_at().expect("resolved");
        SaveOutcome {
            resolution,
            report: PipelineReport {
                spans: self.recorder.spans_where("checkpoint_id", &self.checkpoint_id),
                blocking_time: self.blocking_time,
                end_to_end: done.saturating_duration_since(self.started),
            },
            ranks,
            metadata: self.metadata,
            cache_hit: self.cache_hit,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LoadOptions {
    /// Label attached to the load's spans.
    pub run_id: String,
    pub engine: EngineConfig,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self {
            run_id: "load".into(),
            engine: EngineConfig::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LoadedCheckpoint {
    pub model: ModelSpec,
    pub spec: ShardingSpec,
    pub metadata: GlobalMetadata,
    pub ranks: Vec<RankState>,
    pub replicated: Option<ReplicatedLoaderState>,
    pub plans: BTreeMap<u32, LoadPlan>,
    pub report: PipelineReport,
}

impl LoadedCheckpoint {
    /// Compares every loaded shard with freshly materialized content.
    pub fn verify(&self) -> Result<()> {
        for rs in &self.ranks {
            for (shard, bytes) in &rs.tensors {
                if *bytes != materialize_shard(&self.model, shard)? {
                    return Err(Error::Integrity(format!("rank {} loaded wrong bytes for {shard}", rs.rank)));
                }
            }
        }
        Ok(())
    }
}

/// Reads the stored model description and metadata of a complete checkpoint.
pub fn open_checkpoint(backend: &dyn StorageBackend, location: &str) -> Result<(ModelSpec, GlobalMetadata)> {
    ensure_complete(backend, location)?;
    let model = ModelSpec::from_json(
        &backend
            .read_file(MODEL_FILE)
            .map_err(|e| Error::Integrity(format!("checkpoint `{location}` has no {MODEL_FILE}: {e}")))?,
    )?;
    let meta = decode_metadata(&backend.read_file(METADATA_FILE)?)?;
    if let Some(v) = validate_coverage(&meta).first() {
        return Err(Error::Integrity(format!("checkpoint `{location}` metadata is inconsistent: {v}")));
    }
    Ok((model, meta))
}

/// Every stored byte range must exist before any rank starts reading.
fn preflight(backend: &dyn StorageBackend, meta: &GlobalMetadata) -> Result<()> {
    let mut need: BTreeMap<&str, (u64, u64)> = BTreeMap::new();
    for e in meta.entries() {
        let end = e.byte.byte_offset + e.byte.byte_length;
        let slot = need.entry(&e.byte.file_name).or_insert((e.byte.byte_offset, end));
        if end > slot.1 {
            *slot = (e.byte.byte_offset, end);
        }
    }
    for (file, (offset, end)) in need {
        let len = backend.stat(file).map_err(|e| Error::Read {
            file: file.to_string(),
            offset,
            reason: e.to_string(),
        })?;
        if len.len < end {
            return Err(Error::Read {
                file: file.to_string(),
                offset,
                reason: format!("file has {} bytes, metadata needs {end}", len.len),
            });
        }
    }
    Ok(())
}

/// Loads a complete checkpoint into `target`, resharding tensors and
/// dataloader state as needed.
pub fn load_checkpoint(
    backend: Arc<dyn StorageBackend>,
    location: &str,
    target: &ShardingSpec,
    opts: &LoadOptions,
    comm: &Comm,
    recorder: &Arc<Recorder>,
) -> Result<LoadedCheckpoint> {
    let started = Instant::now();
    opts.engine.validate()?;
    let (model, meta) = open_checkpoint(backend.as_ref(), location)?;
    model.check_compatible(target)?;
    let layouts = all_layouts(&model, target)?;
    preflight(backend.as_ref(), &meta)?;

    let plan_span = recorder.span(0, "plan").attr("checkpoint_id", &opts.run_id);
    let plans = coordinate_load(comm, &meta, &layouts, target)?;
    drop(plan_span);

    let world = target.world_size();
    let engine = Arc::new(opts.engine.clone());
    let endpoints = comm.exchange(world, engine.exchange_deadline);
    let results: Vec<Result<BTreeMap<ShardMeta, Vec<u8>>>> = thread::scope(|s| {
        let workers: Vec<_> = endpoints
            .into_iter()
            .map(|endpoint| {
                let plan = &plans[&endpoint.rank];
                let ctx = LoadContext {
                    checkpoint_id: opts.run_id.clone(),
                    backend: backend.clone(),
                    config: engine.clone(),
                    recorder: recorder.clone(),
                    endpoint,
                };
                s.spawn(move || execute_load(plan, ctx).map(|(shards, _)| shards))
            })
            .collect();
        workers.into_iter().map(|w| w.join().expect("load thread panicked")).collect()
    });
    // A failing rank makes its peers time out; report the root cause.
    let mut tensors = Vec::with_capacity(results.len());
    let mut errors = Vec::new();
    for r in results {
        match r {
            Ok(t) => tensors.push(t),
            Err(e) => errors.push(e),
        }
    }
    if !errors.is_empty() {
        errors.sort_by_key(|e| matches!(e, Error::Timeout(_)));
        return Err(errors.remove(0));
    }

    let reshard_span = recorder.span(0, "loader_reshard").attr("checkpoint_id", &opts.run_id);
    let mut sources = Vec::with_capacity(meta.loader_map.len());
    for (dp, bm) in &meta.loader_map {
        let bytes = backend
            .read_range(&bm.file_name, bm.byte_offset, bm.byte_length)
            .map_err(|e| Error::Integrity(format!("loader file `{}` for dp rank {dp} is unreadable: {e}", bm.file_name)))?;
        sources.push(ShardedLoaderState::decode(&bytes)?);
    }
    let loaders = if sources.is_empty() {
        Vec::new()
    } else {
        reshard_loader(&sources, target.dp, false)?
    };
    let replicated = match &meta.replicated_loader_file {
        Some(f) => Some(ReplicatedLoaderState::decode(&backend.read_file(f).map_err(|e| {
            Error::Integrity(format!("replicated loader file `{f}` is unreadable: {e}"))
        })?)?),
        None => None,
    };
    drop(reshard_span);

    let mut ranks = Vec::with_capacity(world as usize);
    for (layout, shards) in layouts.iter().zip(tensors) {
        let r = layout.global_rank;
        let extra = match meta.extra_state_files.get(&r) {
            Some(f) if backend.exists(f) => backend.read_file(f)?,
            _ => Vec::new(),
        };
        ranks.push(RankState {
            rank: r,
            tensors: shards,
            loader: layout
                .holds_dataloader_state
                .then(|| loaders.get(layout.coords.dp_idx as usize).cloned())
                .flatten(),
            extra,
        });
    }
    let elapsed = started.elapsed();
    Ok(LoadedCheckpoint {
        model,
        spec: *target,
        metadata: meta,
        ranks,
        replicated,
        plans,
        report: PipelineReport {
            spans: recorder.spans_where("checkpoint_id", &opts.run_id),
            blocking_time: elapsed,
            end_to_end: elapsed,
        },
    })
}
