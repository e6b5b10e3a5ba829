//! Test-side oracles. Index arithmetic here is written independently of the
//! library's geometry helpers so the two can check each other.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use ckpt_core::checkpoint::{RankState, SaveOutcome};
use ckpt_core::comm::Comm;
use ckpt_core::metadata::{Dtype, ShardMeta};
use ckpt_core::metrics::Recorder;
use ckpt_core::storage::{MemoryBackend, StorageBackend};
use ckpt_core::{
    load_checkpoint, Checkpointer, LoadOptions, LoadedCheckpoint, ModelSpec, SaveOptions, ShardingSpec, TensorSpec,
    ZeroMode,
};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

const DTYPES: [Dtype; 5] = [Dtype::F32, Dtype::F64, Dtype::I32, Dtype::I64, Dtype::U8];

/// A random model whose TP axes divide by 4 and whose stages fit `pp`.
pub fn random_model(rng: &mut ChaCha8Rng, max_tensors: usize, max_numel: u64, pp: u32) -> ModelSpec {
    let n = rng.gen_range(1..=max_tensors);
    let tensors = (0..n)
        .map(|i| {
            let ndim = rng.gen_range(1..=3usize);
            let budget = if rng.gen_bool(0.1) { max_numel } else { max_numel.min(512) };
            let mut shape = Vec::with_capacity(ndim);
            let mut numel = 1u64;
            for _ in 0..ndim {
                let room = (budget / numel).max(1);
                let d = rng.gen_range(1..=room.min(64));
                shape.push(d);
                numel *= d;
            }
            let tp_shard_axis = if rng.gen_bool(0.6) {
                let axis = rng.gen_range(0..ndim);
                // round the sharded extent to a multiple of 4, staying in budget
                let others = numel / shape[axis];
                let cap = (max_numel / others / 4).max(1);
                shape[axis] = 4 * (shape[axis] / 4).clamp(1, cap);
                Some(axis)
            } else {
                None
            };
            TensorSpec {
                fqn: format!("layers.{i}.w"),
                global_shape: shape,
                dtype: DTYPES[rng.gen_range(0..DTYPES.len())],
                tp_shard_axis,
                pp_stage: rng.gen_range(0..pp),
            }
        })
        .collect();
    ModelSpec {
        tensors,
        seed: rng.gen(),
    }
}

pub fn random_spec(rng: &mut ChaCha8Rng, max_world: u32, allow_zero: bool) -> ShardingSpec {
    loop {
        let mut pick = || [1u32, 2, 4][rng.gen_range(0..3)];
        let (tp, dp, pp) = (pick(), pick(), pick());
        if tp * dp * pp <= max_world {
            let zero = if allow_zero && rng.gen_bool(0.5) {
                ZeroMode::FlattenConcatShard
            } else {
                ZeroMode::None
            };
            return ShardingSpec::new(tp, dp, pp, zero);
        }
    }
}

/// Calls `f(local_index, global_flat_index)` for every element of `shard`
/// in row-major order.
pub fn for_each_element(shard: &ShardMeta, global_shape: &[u64], mut f: impl FnMut(u64, u64)) {
    let n: u64 = shard.nd_lengths.iter().product();
    let mut coords = vec![0u64; shard.nd_lengths.len()];
    for local in 0..n {
        let mut rem = local;
        for axis in (0..coords.len()).rev() {
            coords[axis] = rem % shard.nd_lengths[axis];
            rem /= shard.nd_lengths[axis];
        }
        let mut flat = 0u64;
        for axis in 0..coords.len() {
            flat = flat * global_shape[axis] + shard.nd_offsets[axis] + coords[axis];
        }
        f(local, flat);
    }
}

/// Whole tensors rebuilt element by element from shards, with a cover count
/// per element.
pub struct GlobalImage {
    tensors: BTreeMap<String, Image>,
}

struct Image {
    shape: Vec<u64>,
    elem: usize,
    bytes: Vec<u8>,
    hits: Vec<u32>,
}

impl GlobalImage {
    pub fn empty(model: &ModelSpec) -> Self {
        let mut tensors = BTreeMap::new();
        for t in &model.tensors {
            let numel: u64 = t.global_shape.iter().product();
            let elem = t.dtype.element_size();
            for fqn in [t.fqn.clone(), format!("optimizer.{}", t.fqn)] {
                tensors.insert(
                    fqn,
                    Image {
                        shape: t.global_shape.clone(),
                        elem,
                        bytes: vec![0; numel as usize * elem],
                        hits: vec![0; numel as usize],
                    },
                );
            }
        }
        Self { tensors }
    }

    /// Writes every saved shard; replicas must agree byte for byte.
    pub fn from_ranks(model: &ModelSpec, ranks: &[RankState]) -> Result<Self, String> {
        let mut img = Self::empty(model);
        for rs in ranks {
            for (shard, bytes) in &rs.tensors {
                img.scatter(shard, bytes)?;
            }
        }
        Ok(img)
    }

    pub fn scatter(&mut self, shard: &ShardMeta, bytes: &[u8]) -> Result<(), String> {
        let im = self.tensors.get_mut(&shard.fqn).ok_or_else(|| format!("unknown fqn {}", shard.fqn))?;
        let e = im.elem;
        let mut err = None;
        for_each_element(shard, &im.shape, |local, flat| {
            let (l, g) = (local as usize * e, flat as usize * e);
            let src = &bytes[l..l + e];
            if im.hits[flat as usize] > 0 && im.bytes[g..g + e] != *src && err.is_none() {
                err = Some(format!("{} element {flat}: replicas disagree", shard.fqn));
            }
            im.bytes[g..g + e].copy_from_slice(src);
            im.hits[flat as usize] += 1;
        });
        err.map_or(Ok(()), Err)
    }

    /// Per-fqn hit counts.
    pub fn hits(&self, fqn: &str) -> &[u32] {
        &self.tensors[fqn].hits
    }

    pub fn fqns(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn uncovered(&self) -> Option<(String, usize)> {
        self.tensors
            .iter()
            .find_map(|(f, im)| im.hits.iter().position(|h| *h == 0).map(|i| (f.clone(), i)))
    }

    /// Checks `bytes` against the image element by element.
    pub fn check(&self, shard: &ShardMeta, bytes: &[u8]) -> Result<(), String> {
        let im = &self.tensors[&shard.fqn];
        let e = im.elem;
        let n: u64 = shard.nd_lengths.iter().product();
        if bytes.len() != n as usize * e {
            return Err(format!("{shard:?}: {} bytes, expected {}", bytes.len(), n as usize * e));
        }
        let mut bad = None;
        for_each_element(shard, &im.shape, |local, flat| {
            let (l, g) = (local as usize * e, flat as usize * e);
            if bad.is_none() && bytes[l..l + e] != im.bytes[g..g + e] {
                bad = Some(format!("{} element {flat} differs", shard.fqn));
            }
        });
        bad.map_or(Ok(()), Err)
    }
}

pub fn memory() -> Arc<dyn StorageBackend> {
    Arc::new(MemoryBackend::new())
}

pub fn save_synthetic(
    model: &ModelSpec,
    spec: ShardingSpec,
    backend: Arc<dyn StorageBackend>,
    id: &str,
) -> (SaveOutcome, Vec<RankState>) {
    let mut ck = Checkpointer::new(model.clone(), spec).expect("valid model and spec");
    let state = ck.synthetic_state(1).expect("synthetic state");
    let out = ck.save(&state, backend, &SaveOptions::new(id)).expect("save starts").wait();
    (out, state.ranks)
}

pub fn load(backend: Arc<dyn StorageBackend>, id: &str, target: ShardingSpec) -> ckpt_core::Result<LoadedCheckpoint> {
    load_checkpoint(
        backend,
        id,
        &target,
        &LoadOptions::default(),
        &Comm::for_world(target.world_size()),
        &Arc::new(Recorder::new()),
    )
}

/// Saves under `src`, loads under `dst` and checks every loaded element
/// against the image of what was saved.
pub fn round_trip(model: &ModelSpec, src: ShardingSpec, dst: ShardingSpec) -> Result<(), String> {
    let backend = memory();
    let (out, saved) = save_synthetic(model, src, backend.clone(), "rt");
    if !out.resolution.is_complete() {
        return Err(format!("save did not complete: {:?}", out.resolution));
    }
    let image = GlobalImage::from_ranks(model, &saved)?;
    if let Some((fqn, i)) = image.uncovered() {
        return Err(format!("saved state misses {fqn} element {i}"));
    }
    let loaded = load(backend, "rt", dst).map_err(|e| e.to_string())?;
    let layouts = ckpt_core::sharding::all_layouts(model, &dst).map_err(|e| e.to_string())?;
    for (rs, layout) in loaded.ranks.iter().zip(&layouts) {
        let want: Vec<&ShardMeta> = layout.all_shards().map(|(s, _)| s).collect();
        let got: Vec<&ShardMeta> = rs.tensors.keys().collect();
        let mut want_sorted = want.clone();
        want_sorted.sort();
        if want_sorted != got {
            return Err(format!("rank {} loaded a different shard set", rs.rank));
        }
        for (shard, bytes) in &rs.tensors {
            image.check(shard, bytes).map_err(|e| format!("rank {}: {e}", rs.rank))?;
        }
    }
    let mut loaded_image = GlobalImage::empty(model);
    for rs in &loaded.ranks {
        for (shard, bytes) in &rs.tensors {
            loaded_image.scatter(shard, bytes)?;
        }
    }
    if let Some((fqn, i)) = loaded_image.uncovered() {
        return Err(format!("no target rank holds {fqn} element {i}"));
    }
    // dataloader samples survive the DP change
    let ids = |states: Vec<&ckpt_core::loader::ShardedLoaderState>| {
        let mut v: Vec<u64> = states.iter().flat_map(|s| s.token_buffer.iter().map(|x| x.sample_id)).collect();
        v.sort_unstable();
        v
    };
    let before = ids(saved.iter().filter_map(|r| r.loader.as_ref()).collect());
    let after = ids(loaded.ranks.iter().filter_map(|r| r.loader.as_ref()).collect());
    if before != after {
        return Err("dataloader sample multiset changed".into());
    }
    let holders = loaded.ranks.iter().filter(|r| r.loader.is_some()).count();
    if holders != dst.dp as usize {
        return Err(format!("{holders} loader holders for dp={}", dst.dp));
    }
    Ok(())
}
