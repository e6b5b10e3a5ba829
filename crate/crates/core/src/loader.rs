//! Dataloader state: replicated settings, per-DP-rank token buffers,
//! resharding across DP changes and prefetching through state queues.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use crate::error::{Error, Result};

pub const REPLICATED_LOADER_FILE: &str = "loader_replicated.bin";
const SHARDED_MAGIC: &[u8; 4] = b"LDRS";
const REPLICATED_MAGIC: &[u8; 4] = b"LDRR";
const CODEC_VERSION: u16 = 1;

pub fn loader_file_name(dp_rank: u32) -> String {
    format!("loader_{dp_rank}.bin")
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplicatedLoaderState {
    pub num_read_workers: u32,
    pub source_paths: Vec<String>,
    pub sampling_ratios: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Sample {
    pub sample_id: u64,
    pub token_count: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShardedLoaderState {
    pub dp_rank: u32,
    pub token_buffer: Vec<Sample>,
    pub retrieval_offsets: BTreeMap<String, u64>,
}

impl ReplicatedLoaderState {
    pub fn validate(&self) -> Result<()> {
        if self.source_paths.len() != self.sampling_ratios.len() {
            return Err(Error::Config("one sampling ratio per source path".into()));
        }
        let sum: f64 = self.sampling_ratios.iter().sum();
        if self.sampling_ratios.iter().any(|r| *r < 0.0) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("sampling ratios must be non-negative and sum to 1, got {sum}")));
        }
        Ok(())
    }
}

/// Redistributes sharded loader states from `states.len()` DP ranks to
/// `target_dp` ranks.
///
/// With an unchanged DP degree the states are passed through untouched.
/// Otherwise all buffers are concatenated in source-rank order and cut into
/// `target_dp` contiguous chunks whose sizes differ by at most one (earlier
/// ranks take the extra samples). Retrieval offsets merge by maximum.
pub fn reshard_loader(
    states: &[ShardedLoaderState],
    target_dp: u32,
    parallelism_changed_only_non_dp: bool,
) -> Result<Vec<ShardedLoaderState>> {
    if target_dp == 0 {
        return Err(Error::Config("target dp must be positive".into()));
    }
    if states.iter().enumerate().any(|(i, s)| s.dp_rank != i as u32) {
        return Err(Error::Precondition("loader states must be sorted by dp_rank 0..S".into()));
    }
    let mut seen = BTreeSet::new();
    for s in states {
        for sample in &s.token_buffer {
            if !seen.insert(sample.sample_id) {
                return Err(Error::Integrity(format!(
                    "sample id {} appears twice across loader states",
                    sample.sample_id
                )));
            }
        }
    }
    let source_dp = states.len() as u32;
    if parallelism_changed_only_non_dp && source_dp != target_dp {
        return Err(Error::Precondition(format!(
            "DP degree changed ({source_dp} -> {target_dp}) but only non-DP changes were declared"
        )));
    }
    if source_dp == target_dp {
        return Ok(states.to_vec());
    }

    let merged: Vec<Sample> = states.iter().flat_map(|s| s.token_buffer.iter().copied()).collect();
    let mut offsets: BTreeMap<String, u64> = BTreeMap::new();
    for s in states {
        for (path, off) in &s.retrieval_offsets {
            let e = offsets.entry(path.clone()).or_insert(0);
            *e = (*e).max(*off);
        }
    }
    let t = target_dp as usize;
    let base = merged.len() / t;
    let extra = merged.len() % t;
    let mut out = Vec::with_capacity(t);
    let mut cursor = 0;
    for rank in 0..t {
        let n = base + usize::from(rank < extra);
        out.push(ShardedLoaderState {
            dp_rank: rank as u32,
            token_buffer: merged[cursor..cursor + n].to_vec(),
            retrieval_offsets: offsets.clone(),
        });
        cursor += n;
    }
    Ok(out)
}

struct Writer(Vec<u8>);

impl Writer {
    fn new(magic: &[u8; 4]) -> Self {
        let mut v = magic.to_vec();
        v.extend_from_slice(&CODEC_VERSION.to_le_bytes());
        Writer(v)
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8], magic: &[u8; 4]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(4)? != magic {
            return Err(Error::Codec("bad loader state magic".into()));
        }
        let version = u16::from_le_bytes(r.take(2)?.try_into().unwrap());
        if version != CODEC_VERSION {
            return Err(Error::Codec(format!("unsupported loader codec version {version}")));
        }
        Ok(r)
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|e| *e <= self.buf.len())
            .ok_or_else(|| Error::Codec(format!("truncated loader state at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| Error::Codec(e.to_string()))
    }
    fn finish(self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Codec(format!("{} trailing bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

impl ShardedLoaderState {
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new(SHARDED_MAGIC);
        w.u32(self.dp_rank);
        w.u32(self.token_buffer.len() as u32);
        for s in &self.token_buffer {
            w.u64(s.sample_id);
            w.u32(s.token_count);
        }
        w.u32(self.retrieval_offsets.len() as u32);
        for (path, off) in &self.retrieval_offsets {
            w.str(path);
            w.u64(*off);
        }
        w.0
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, SHARDED_MAGIC)?;
        let dp_rank = r.u32()?;
        let n = r.u32()?;
        let mut token_buffer = Vec::new();
        for _ in 0..n {
            token_buffer.push(Sample {
                sample_id: r.u64()?,
                token_count: r.u32()?,
            });
        }
        let m = r.u32()?;
        let mut retrieval_offsets = BTreeMap::new();
        for _ in 0..m {
            let path = r.str()?;
            retrieval_offsets.insert(path, r.u64()?);
        }
        r.finish()?;
        Ok(Self {
            dp_rank,
            token_buffer,
            retrieval_offsets,
        })
    }
}

impl ReplicatedLoaderState {
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new(REPLICATED_MAGIC);
        w.u32(self.num_read_workers);
        w.u32(self.source_paths.len() as u32);
        for p in &self.source_paths {
            w.str(p);
        }
        w.u32(self.sampling_ratios.len() as u32);
        for r in &self.sampling_ratios {
            w.u64(r.to_bits());
        }
        w.0
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, REPLICATED_MAGIC)?;
        let num_read_workers = r.u32()?;
        let n = r.u32()?;
        let source_paths = (0..n).map(|_| r.str()).collect::<Result<Vec<_>>>()?;
        let m = r.u32()?;
        let sampling_ratios = (0..m).map(|_| r.u64().map(f64::from_bits)).collect::<Result<Vec<_>>>()?;
        r.finish()?;
        Ok(Self {
            num_read_workers,
            source_paths,
            sampling_ratios,
        })
    }
}

/// Deterministic synthetic loader state for a DP rank at a training step.
pub fn synthetic_sharded_state(seed: u64, dp_rank: u32, step: u64) -> ShardedLoaderState {
    let mix = |x: u64| x.wrapping_mul(0x9e37_79b9_7f4a_7c15).rotate_left(29) ^ seed;
    let n = 1 + (mix(dp_rank as u64 ^ step) % 5) as usize;
    let token_buffer = (0..n)
        .map(|i| Sample {
            sample_id: (dp_rank as u64) << 32 | (step << 8) | i as u64,
            token_count: 1 + (mix(i as u64 + 17 * dp_rank as u64) % 4096) as u32,
        })
        .collect();
    let retrieval_offsets = ["corpus/web", "corpus/code"]
        .iter()
        .enumerate()
        .map(|(k, p)| (p.to_string(), step * 64 + (mix(k as u64 + dp_rank as u64) % 64)))
        .collect();
    ShardedLoaderState {
        dp_rank,
        token_buffer,
        retrieval_offsets,
    }
}

pub fn synthetic_replicated_state() -> ReplicatedLoaderState {
    ReplicatedLoaderState {
        num_read_workers: 4,
        source_paths: vec!["corpus/web".into(), "corpus/code".into()],
        sampling_ratios: vec![0.7, 0.3],
    }
}

/// Per-read-worker queues of states prepared ahead of a checkpoint step.
#[derive(Debug)]
pub struct StateQueue {
    queues: Vec<Mutex<VecDeque<(u64, ShardedLoaderState)>>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GatherOutcome {
    pub states: Vec<ShardedLoaderState>,
    /// Wall time spent polling plus simulated preparation time of every
    /// worker that had to be collected synchronously.
    pub gather_delay: Duration,
    pub prefetched_workers: usize,
}

impl StateQueue {
    pub fn new(num_workers: usize) -> Self {
        Self {
            queues: (0..num_workers).map(|_| Mutex::new(VecDeque::new())).collect(),
        }
    }

    pub fn num_workers(&self) -> usize {
        self.queues.len()
    }

    /// Called by read worker `worker` during the step before a checkpoint.
    pub fn push(&self, worker: usize, step: u64, state: ShardedLoaderState) -> Result<()> {
        let mut q = self
            .queues
            .get(worker)
            .ok_or_else(|| Error::Precondition(format!("no read worker {worker}")))?
            .lock()
            .unwrap();
        if q.iter().any(|(s, _)| *s == step) {
            return Err(Error::Precondition(format!("worker {worker} already prepared step {step}")));
        }
        q.push_back((step, state));
        Ok(())
    }

    fn poll(&self, worker: usize, step: u64) -> Option<ShardedLoaderState> {
        let mut q = self.queues[worker].lock().unwrap();
        let mut found = None;
        // stale snapshots for other steps are discarded
        while let Some((s, state)) = q.pop_front() {
            if s == step {
                found = Some(state);
            } else if s > step {
                q.push_front((s, state));
                break;
            }
        }
        found
    }
}

/// Gathers every worker's state for `step`: queue hits cost only polling,
/// misses fall back to synchronous preparation at `prep_latency` each.
pub fn prefetch_states(
    queue: &StateQueue,
    step: u64,
    prep_latency: Duration,
    mut prepare: impl FnMut(usize, u64) -> ShardedLoaderState,
) -> GatherOutcome {
    let started = Instant::now();
    let mut states = Vec::with_capacity(queue.num_workers());
    let mut simulated = Duration::ZERO;
    let mut prefetched = 0;
    for worker in 0..queue.num_workers() {
        match queue.poll(worker, step) {
            Some(s) => {
                prefetched += 1;
                states.push(s);
            }
            None => {
                simulated += prep_latency;
                states.push(prepare(worker, step));
            }
        }
    }
    GatherOutcome {
        states,
        gather_delay: started.elapsed() + simulated,
        prefetched_workers: prefetched,
    }
}

/// The synchronous collection path: every worker prepares on demand.
pub fn synchronous_gather_delay(num_workers: usize, prep_latency: Duration) -> Duration {
    prep_latency * num_workers as u32
}
