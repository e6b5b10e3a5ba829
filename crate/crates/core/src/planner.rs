//! Save and load planning.
//!
//! Saving deduplicates replicated shards and spreads the survivors over their
//! holders with a Worst-Fit rule; loading matches wanted shards against the
//! saved ones and lets one rank per DP replica group read each region.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::comm::Comm;
use crate::error::{Error, Result};
use crate::geometry::{overlap, unflatten, Overlap};
use crate::loader::{loader_file_name, REPLICATED_LOADER_FILE};
use crate::metadata::{BasicMeta, ByteMeta, GlobalMetadata, ShardEntry, ShardMeta};
use crate::sharding::{ModelSpec, RankLayout, ShardingSpec, OPTIMIZER_PREFIX};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum WriteSource {
    Model,
    Optimizer,
    Extra,
    Loader,
}

impl WriteSource {
    pub fn of_fqn(fqn: &str) -> Self {
        if fqn.starts_with(OPTIMIZER_PREFIX) {
            WriteSource::Optimizer
        } else {
            WriteSource::Model
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WriteItem {
    pub shard: ShardMeta,
    pub basic: BasicMeta,
    pub source: WriteSource,
    pub assigned_rank: u32,
}

impl WriteItem {
    pub fn byte_len(&self) -> u64 {
        self.shard.numel() * self.basic.dtype.element_size() as u64
    }
}

/// Opaque (non-tensor) state a rank persists as a whole file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum BlobItem {
    Extra { file_name: String },
    ShardedLoader { dp_rank: u32, file_name: String },
    ReplicatedLoader { file_name: String },
}

impl BlobItem {
    pub fn file_name(&self) -> &str {
        match self {
            BlobItem::Extra { file_name }
            | BlobItem::ShardedLoader { file_name, .. }
            | BlobItem::ReplicatedLoader { file_name } => file_name,
        }
    }

    pub fn source(&self) -> WriteSource {
        match self {
            BlobItem::Extra { .. } => WriteSource::Extra,
            _ => WriteSource::Loader,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SavePlan {
    pub rank: u32,
    /// Tensor items sorted by (fqn, offsets).
    pub items: Vec<WriteItem>,
    pub blobs: Vec<BlobItem>,
    pub model_file: String,
    pub optim_file: String,
}

impl SavePlan {
    pub fn target_files(&self) -> Vec<String> {
        let mut files = vec![self.model_file.clone(), self.optim_file.clone()];
        files.extend(self.blobs.iter().map(|b| b.file_name().to_string()));
        files
    }

    pub fn file_for(&self, source: WriteSource) -> &str {
        match source {
            WriteSource::Optimizer => &self.optim_file,
            _ => &self.model_file,
        }
    }

    pub fn tensor_bytes(&self) -> u64 {
        self.items.iter().map(WriteItem::byte_len).sum()
    }
}

pub fn model_file_name(rank: u32) -> String {
    format!("model_{rank}.bin")
}

pub fn optim_file_name(rank: u32) -> String {
    format!("optim_{rank}.bin")
}

pub fn extra_file_name(rank: u32) -> String {
    format!("extra_{rank}.bin")
}

fn check_layouts(layouts: &[RankLayout], spec: &ShardingSpec) -> Result<()> {
    if layouts.len() as u32 != spec.world_size() {
        return Err(Error::Planning(format!(
            "{} layouts for a world of {}",
            layouts.len(),
            spec.world_size()
        )));
    }
    for (i, l) in layouts.iter().enumerate() {
        if l.global_rank != i as u32 {
            return Err(Error::Planning(format!("layout {i} reports rank {}", l.global_rank)));
        }
    }
    Ok(())
}

/// Builds every rank's save plan and the checkpoint's tensor metadata.
pub fn plan_save(layouts: &[RankLayout], spec: &ShardingSpec) -> Result<(BTreeMap<u32, SavePlan>, GlobalMetadata)> {
    check_layouts(layouts, spec)?;

    // Replicas within a DP group must describe identical model shards.
    for l in layouts {
        let leader = &layouts[spec.replica_group(l.global_rank)[0] as usize];
        let metas = |x: &RankLayout| x.model_shards.iter().map(|(s, _)| s.clone()).collect::<Vec<_>>();
        if metas(l) != metas(leader) {
            return Err(Error::Planning(format!(
                "rank {} disagrees with replica rank {} on its model shards",
                l.global_rank, leader.global_rank
            )));
        }
    }

    let mut basics: BTreeMap<&str, &BasicMeta> = BTreeMap::new();
    let mut holders: BTreeMap<&ShardMeta, Vec<(u32, &BasicMeta)>> = BTreeMap::new();
    for l in layouts {
        for (s, b) in l.all_shards() {
            let known = basics.entry(&b.fqn).or_insert(b);
            if known.global_shape != b.global_shape || known.dtype != b.dtype || known.stride != b.stride {
                return Err(Error::Planning(format!("ranks disagree on shape/dtype of `{}`", b.fqn)));
            }
            holders.entry(s).or_default().push((l.global_rank, b));
        }
    }

    let mut load = vec![0u64; layouts.len()];
    let mut assigned: Vec<(&ShardMeta, u32, &BasicMeta)> = Vec::with_capacity(holders.len());
    // (shard, holders, bytes) of shards held by more than one rank
    let mut replicated = Vec::new();
    for (shard, hs) in &holders {
        let bytes = shard.numel() * hs[0].1.dtype.element_size() as u64;
        if hs.len() == 1 {
            load[hs[0].0 as usize] += bytes;
            assigned.push((shard, hs[0].0, hs[0].1));
        } else {
            replicated.push((shard, hs, bytes));
        }
    }
    // Worst-Fit decreasing: biggest shard first, to the least-loaded holder.
    replicated.sort_by(|a, b| b.2.cmp(&a.2).then_with(|| a.0.cmp(b.0)));
    for (shard, hs, bytes) in replicated {
        let &(rank, basic) = hs
            .iter()
            .min_by_key(|(r, _)| (load[*r as usize], *r))
            .expect("replicated shard has holders");
        load[rank as usize] += bytes;
        assigned.push((shard, rank, basic));
    }

    let mut plans: BTreeMap<u32, SavePlan> = layouts
        .iter()
        .map(|l| {
            let rank = l.global_rank;
            let mut blobs = vec![BlobItem::Extra {
                file_name: extra_file_name(rank),
            }];
            if l.holds_dataloader_state {
                blobs.push(BlobItem::ShardedLoader {
                    dp_rank: l.coords.dp_idx,
                    file_name: loader_file_name(l.coords.dp_idx),
                });
            }
            if rank == 0 {
                blobs.push(BlobItem::ReplicatedLoader {
                    file_name: REPLICATED_LOADER_FILE.to_string(),
                });
            }
            (
                rank,
                SavePlan {
                    rank,
                    items: Vec::new(),
                    blobs,
                    model_file: model_file_name(rank),
                    optim_file: optim_file_name(rank),
                },
            )
        })
        .collect();
    for (shard, rank, basic) in assigned {
        plans.get_mut(&rank).expect("rank has a plan").items.push(WriteItem {
            shard: shard.clone(),
            basic: basic.clone(),
            source: WriteSource::of_fqn(&shard.fqn),
            assigned_rank: rank,
        });
    }

    let mut meta = GlobalMetadata::new();
    for plan in plans.values_mut() {
        plan.items.sort_by(|a, b| a.shard.cmp(&b.shard));
        let mut cursor: BTreeMap<WriteSource, u64> = BTreeMap::new();
        for item in &plan.items {
            let offset = cursor.entry(item.source).or_insert(0);
            meta.insert(ShardEntry {
                shard: item.shard.clone(),
                basic: item.basic.clone(),
                byte: ByteMeta {
                    file_name: plan.file_for(item.source).to_string(),
                    byte_offset: *offset,
                    byte_length: item.byte_len(),
                },
                writer_rank: plan.rank,
            });
            *offset += item.byte_len();
        }
        meta.extra_state_files.insert(plan.rank, extra_file_name(plan.rank));
    }
    Ok((plans, meta))
}

/// A consumer of a read region and where the region lands in its shard.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReadTarget {
    pub rank: u32,
    pub wanted: ShardMeta,
    pub dst_rel_offsets: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReadItem {
    /// Position in the global read list; used to route exchanged data.
    pub id: usize,
    pub entry: ShardEntry,
    /// Region to read; `dst_rel_offsets` refer to the reader's wanted shard.
    pub overlap: Overlap,
    pub reader_rank: u32,
    pub consumer_ranks: Vec<u32>,
    pub targets: Vec<ReadTarget>,
}

impl ReadItem {
    pub fn region_bytes(&self) -> u64 {
        self.overlap.region.numel() * self.entry.basic.dtype.element_size() as u64
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadPlan {
    pub rank: u32,
    pub wanted: Vec<(ShardMeta, BasicMeta)>,
    pub reads: Vec<ReadItem>,
    pub incoming: Vec<ReadItem>,
}

/// First element of `wanted` not covered by any saved entry.
fn first_uncovered(wanted: &ShardMeta, regions: &[Overlap]) -> Vec<u64> {
    let mut covered = vec![false; wanted.numel() as usize];
    for ov in regions {
        for k in 0..ov.region.numel() {
            let local = unflatten(&ov.region.nd_lengths, k);
            let rel: Vec<u64> = local.iter().zip(&ov.dst_rel_offsets).map(|(a, b)| a + b).collect();
            covered[crate::geometry::flat_index(&wanted.nd_lengths, &rel) as usize] = true;
        }
    }
    let k = covered.iter().position(|c| !c).unwrap_or(0) as u64;
    unflatten(&wanted.nd_lengths, k)
        .iter()
        .zip(&wanted.nd_offsets)
        .map(|(a, b)| a + b)
        .collect()
}

/// Matches each target rank's wanted shards against the checkpoint and
/// assigns every (stored entry, region) to one reader per DP replica group.
pub fn plan_load(
    meta: &GlobalMetadata,
    wanted_layouts: &[RankLayout],
    target: &ShardingSpec,
) -> Result<BTreeMap<u32, LoadPlan>> {
    check_layouts(wanted_layouts, target)?;

    // (fqn, entry index, region, replica group leader) -> consumers
    type Demand = (String, usize, ShardMeta, u32);
    let mut demand: BTreeMap<Demand, (Overlap, Vec<ReadTarget>)> = BTreeMap::new();

    for l in wanted_layouts {
        let group = target.replica_group(l.global_rank)[0];
        for (wanted, basic) in l.all_shards() {
            let entries = meta.tensor_map.get(&wanted.fqn).ok_or_else(|| Error::Resharding {
                fqn: wanted.fqn.clone(),
                offsets: wanted.nd_offsets.clone(),
                lengths: wanted.nd_lengths.clone(),
            })?;
            let mut found = Vec::new();
            for (idx, e) in entries.iter().enumerate() {
                if e.basic.global_shape != basic.global_shape || e.basic.dtype != basic.dtype {
                    return Err(Error::Planning(format!(
                        "`{}` saved as {:?} {:?} but wanted as {:?} {:?}",
                        wanted.fqn, e.basic.dtype, e.basic.global_shape, basic.dtype, basic.global_shape
                    )));
                }
                if let Some(ov) = overlap(&e.shard, wanted)? {
                    found.push((idx, ov));
                }
            }
            let covered: u64 = found.iter().map(|(_, ov)| ov.region.numel()).sum();
            if covered != wanted.numel() {
                let regions: Vec<Overlap> = found.iter().map(|(_, o)| o.clone()).collect();
                return Err(Error::Resharding {
                    fqn: wanted.fqn.clone(),
                    offsets: first_uncovered(wanted, &regions),
                    lengths: vec![1; wanted.nd_lengths.len()],
                });
            }
            for (idx, ov) in found {
                let key = (wanted.fqn.clone(), idx, ov.region.clone(), group);
                let slot = demand.entry(key).or_insert_with(|| (ov.clone(), Vec::new()));
                slot.1.push(ReadTarget {
                    rank: l.global_rank,
                    wanted: wanted.clone(),
                    dst_rel_offsets: ov.dst_rel_offsets.clone(),
                });
            }
        }
    }

    let mut candidates: Vec<(Demand, Overlap, Vec<ReadTarget>)> =
        demand.into_iter().map(|(k, (ov, t))| (k, ov, t)).collect();
    let elem = |fqn: &str, idx: usize| meta.tensor_map[fqn][idx].basic.dtype.element_size() as u64;
    candidates.sort_by(|a, b| {
        let ba = a.1.region.numel() * elem(&a.0 .0, a.0 .1);
        let bb = b.1.region.numel() * elem(&b.0 .0, b.0 .1);
        bb.cmp(&ba).then_with(|| a.0.cmp(&b.0))
    });

    let mut read_load: BTreeMap<u32, u64> = BTreeMap::new();
    let mut plans: BTreeMap<u32, LoadPlan> = wanted_layouts
        .iter()
        .map(|l| {
            (
                l.global_rank,
                LoadPlan {
                    rank: l.global_rank,
                    wanted: l.all_shards().cloned().collect(),
                    reads: Vec::new(),
                    incoming: Vec::new(),
                },
            )
        })
        .collect();

    for (id, ((fqn, idx, _, _), ov, mut targets)) in candidates.into_iter().enumerate() {
        targets.sort_by(|a, b| (a.rank, &a.wanted).cmp(&(b.rank, &b.wanted)));
        let mut consumer_ranks: Vec<u32> = targets.iter().map(|t| t.rank).collect();
        consumer_ranks.dedup();
        let reader = *consumer_ranks
            .iter()
            .min_by_key(|r| (read_load.get(r).copied().unwrap_or(0), **r))
            .expect("demand has consumers");
        let entry = meta.tensor_map[&fqn][idx].clone();
        let reader_target = targets.iter().find(|t| t.rank == reader).expect("reader consumes");
        let item = ReadItem {
            id,
            overlap: Overlap {
                dst_rel_offsets: reader_target.dst_rel_offsets.clone(),
                ..ov
            },
            entry,
            reader_rank: reader,
            consumer_ranks: consumer_ranks.clone(),
            targets,
        };
        *read_load.entry(reader).or_insert(0) += item.region_bytes();
        for r in &consumer_ranks {
            if *r != reader {
                plans.get_mut(r).expect("consumer plan").incoming.push(item.clone());
            }
        }
        plans.get_mut(&reader).expect("reader plan").reads.push(item);
    }
    Ok(plans)
}

/// Identifies a planning input: model content, sharding spec and world size.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PlanKey {
    pub model_id: String,
    pub spec: ShardingSpec,
    pub world_size: u32,
}

impl PlanKey {
    pub fn new(model: &ModelSpec, spec: &ShardingSpec) -> Self {
        Self {
            model_id: hex::encode(Sha256::digest(model.to_canonical_json())),
            spec: *spec,
            world_size: spec.world_size(),
        }
    }
}

/// Save plans and metadata reused across saves with an unchanged topology.
#[derive(Debug, Default)]
pub struct PlanCache {
    entry: Option<(PlanKey, BTreeMap<u32, SavePlan>, GlobalMetadata)>,
}

impl PlanCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn clear(&mut self) {
        self.entry = None;
    }

    pub fn key(&self) -> Option<&PlanKey> {
        self.entry.as_ref().map(|e| &e.0)
    }

    pub fn get(&self, key: &PlanKey) -> Option<(&BTreeMap<u32, SavePlan>, &GlobalMetadata)> {
        self.entry
            .as_ref()
            .filter(|e| e.0 == *key)
            .map(|e| (&e.1, &e.2))
    }

    pub fn insert(&mut self, key: PlanKey, plans: BTreeMap<u32, SavePlan>, meta: GlobalMetadata) {
        self.entry = Some((key, plans, meta));
    }
}

#[derive(Debug, Clone)]
pub struct CachedPlan {
    pub plans: BTreeMap<u32, SavePlan>,
    pub metadata: GlobalMetadata,
    pub cache_hit: bool,
}

/// Global save planning through the coordinator: local layouts are gathered
/// up the tree, planned once, and final plans scattered back.
pub fn coordinate_save(comm: &Comm, layouts: &[RankLayout], spec: &ShardingSpec) -> Result<(BTreeMap<u32, SavePlan>, GlobalMetadata)> {
    let gathered = comm.tree_gather(layouts.iter().map(|l| (l.global_rank, l.clone())).collect());
    if !gathered.missing.is_empty() {
        return Err(Error::Planning(format!("no local plan from ranks {:?}", gathered.missing)));
    }
    let layouts: Vec<RankLayout> = gathered.delivered.into_values().collect();
    let (plans, meta) = plan_save(&layouts, spec)?;
    let scattered = comm.tree_scatter(plans);
    if !scattered.missing.is_empty() {
        return Err(Error::Planning(format!("could not deliver plans to ranks {:?}", scattered.missing)));
    }
    Ok((scattered.delivered, meta))
}

pub fn coordinate_load(
    comm: &Comm,
    meta: &GlobalMetadata,
    wanted_layouts: &[RankLayout],
    target: &ShardingSpec,
) -> Result<BTreeMap<u32, LoadPlan>> {
    let gathered = comm.tree_gather(wanted_layouts.iter().map(|l| (l.global_rank, l.clone())).collect());
    if !gathered.missing.is_empty() {
        return Err(Error::Planning(format!("no local load plan from ranks {:?}", gathered.missing)));
    }
    let layouts: Vec<RankLayout> = gathered.delivered.into_values().collect();
    let plans = plan_load(meta, &layouts, target)?;
    let scattered = comm.tree_scatter(plans);
    if !scattered.missing.is_empty() {
        return Err(Error::Planning(format!("could not deliver load plans to ranks {:?}", scattered.missing)));
    }
    Ok(scattered.delivered)
}

/// [`coordinate_save`] behind a [`PlanCache`]; hits skip all coordinator
/// traffic.
pub fn plan_with_cache(
    cache: &mut PlanCache,
    comm: &Comm,
    model: &ModelSpec,
    layouts: &[RankLayout],
    spec: &ShardingSpec,
) -> Result<CachedPlan> {
    let key = PlanKey::new(model, spec);
    if let Some((plans, meta)) = cache.get(&key) {
        return Ok(CachedPlan {
            plans: plans.clone(),
            metadata: meta.clone(),
            cache_hit: true,
        });
    }
    let (plans, meta) = coordinate_save(comm, layouts, spec)?;
    cache.insert(key, plans.clone(), meta.clone());
    Ok(CachedPlan {
        plans,
        metadata: meta,
        cache_hit: false,
    })
}

/// Bytes each rank writes under `plans`.
pub fn save_loads(plans: &BTreeMap<u32, SavePlan>) -> BTreeMap<u32, u64> {
    plans.iter().map(|(r, p)| (*r, p.tensor_bytes())).collect()
}

/// Ranks reading each (entry file, offset, region) in a set of load plans.
pub fn readers_per_region(plans: &BTreeMap<u32, LoadPlan>) -> BTreeMap<(String, u64, ShardMeta), BTreeSet<u32>> {
    let mut out: BTreeMap<_, BTreeSet<u32>> = BTreeMap::new();
    for p in plans.values() {
        for r in &p.reads {
            out.entry((r.entry.byte.file_name.clone(), r.entry.byte.byte_offset, r.overlap.region.clone()))
                .or_default()
                .insert(r.reader_rank);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metadata::{validate_coverage, Dtype};
    use crate::sharding::{all_layouts, TensorSpec, ZeroMode};

    fn tensor(fqn: &str, shape: &[u64], tp_axis: Option<usize>) -> TensorSpec {
        TensorSpec {
            fqn: fqn.into(),
            global_shape: shape.to_vec(),
            dtype: Dtype::U8,
            tp_shard_axis: tp_axis,
            pp_stage: 0,
        }
    }

    /// Model whose shards are all fully replicated over `dp` ranks with the
    /// given byte sizes (u8 tensors, 1-D).
    fn replicated(sizes: &[u64], dp: u32) -> (Vec<RankLayout>, ShardingSpec) {
        let model = ModelSpec {
            tensors: sizes
                .iter()
                .enumerate()
                .map(|(i, s)| tensor(&format!("t{}", (b'a' + i as u8) as char), &[*s], None))
                .collect(),
            seed: 0,
        };
        let spec = ShardingSpec::new(1, dp, 1, ZeroMode::None);
        let mut layouts = all_layouts(&model, &spec).unwrap();
        // keep only model states so the example is exactly the four shards
        layouts.iter_mut().for_each(|l| l.optimizer_shards.clear());
        (layouts, spec)
    }

    #[test]
    fn worst_fit_fixed_example() {
        let (layouts, spec) = replicated(&[100, 60, 50, 40], 2);
        let (plans, meta) = plan_save(&layouts, &spec).unwrap();
        let names = |r: u32| plans[&r].items.iter().map(|i| i.shard.fqn.clone()).collect::<Vec<_>>();
        assert_eq!(names(0), vec!["ta", "td"]);
        assert_eq!(names(1), vec!["tb", "tc"]);
        assert_eq!(save_loads(&plans), BTreeMap::from([(0, 140), (1, 110)]));
        assert!(validate_coverage(&meta).is_empty());
    }

    mod prop {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]
            #[test]
            fn worst_fit_spread_bounded_by_largest_shard(
                sizes in proptest::collection::vec(1u64..500, 1..12),
                dp in 2u32..6,
            ) {
                let (layouts, spec) = replicated(&sizes, dp);
                let (plans, _) = plan_save(&layouts, &spec).unwrap();
                let loads = save_loads(&plans);
                let (max, min) = (loads.values().max().unwrap(), loads.values().min().unwrap());
                prop_assert!(max - min <= *sizes.iter().max().unwrap());
                prop_assert_eq!(loads.values().sum::<u64>(), sizes.iter().sum::<u64>());
            }
        }
    }

    #[test]
    fn equal_shards_alternate() {
        let (layouts, spec) = replicated(&[8, 8], 2);
        let (plans, _) = plan_save(&layouts, &spec).unwrap();
        assert_eq!(plans[&0].items[0].shard.fqn, "ta");
        assert_eq!(plans[&1].items[0].shard.fqn, "tb");
    }

    #[test]
    fn single_dp_keeps_owner() {
        let model = ModelSpec {
            tensors: vec![tensor("w", &[4, 4], Some(0)), tensor("b", &[4], None)],
            seed: 0,
        };
        let spec = ShardingSpec::new(2, 1, 1, ZeroMode::None);
        let layouts = all_layouts(&model, &spec).unwrap();
        let (plans, meta) = plan_save(&layouts, &spec).unwrap();
        for p in plans.values() {
            for item in p.items.iter().filter(|i| i.shard.fqn.ends_with('w')) {
                assert_eq!(item.assigned_rank, p.rank);
                assert_eq!(item.shard.nd_offsets[0], 2 * p.rank as u64);
            }
        }
        assert!(validate_coverage(&meta).is_empty());
        // byte offsets are contiguous per file in item order
        let m0: Vec<&ShardEntry> = meta.entries().filter(|e| e.byte.file_name == "model_0.bin").collect();
        let mut spans: Vec<(u64, u64)> = m0.iter().map(|e| (e.byte.byte_offset, e.byte.byte_length)).collect();
        spans.sort();
        let mut next = 0;
        for (o, l) in spans {
            assert_eq!(o, next);
            next += l;
        }
    }

    #[test]
    fn inconsistent_replicas_rejected() {
        let (mut layouts, spec) = replicated(&[10, 20], 2);
        layouts[1].model_shards[0].0.nd_lengths = vec![5];
        assert!(matches!(plan_save(&layouts, &spec), Err(Error::Planning(_))));
    }

    #[test]
    fn identity_load_reads_own_shards() {
        let model = ModelSpec {
            tensors: vec![tensor("w", &[4, 4], Some(1)), tensor("b", &[6], None)],
            seed: 3,
        };
        let spec = ShardingSpec::new(2, 1, 1, ZeroMode::None);
        let layouts = all_layouts(&model, &spec).unwrap();
        let (_, meta) = plan_save(&layouts, &spec).unwrap();
        let plans = plan_load(&meta, &layouts, &spec).unwrap();
        for p in plans.values() {
            assert!(p.incoming.is_empty());
            for r in &p.reads {
                if r.entry.shard.fqn.ends_with('w') {
                    assert_eq!(r.entry.writer_rank, p.rank);
                    assert_eq!(r.overlap.region, r.entry.shard);
                }
            }
        }
    }

    #[test]
    fn tp_halves_merge_into_one_rank() {
        let model = ModelSpec {
            tensors: vec![tensor("w", &[4, 4], Some(0))],
            seed: 3,
        };
        let src = ShardingSpec::new(2, 1, 1, ZeroMode::None);
        let (_, meta) = plan_save(&all_layouts(&model, &src).unwrap(), &src).unwrap();
        let dst = ShardingSpec::new(1, 1, 1, ZeroMode::None);
        let plans = plan_load(&meta, &all_layouts(&model, &dst).unwrap(), &dst).unwrap();
        let mut regions: Vec<(Vec<u64>, Vec<u64>)> = plans[&0]
            .reads
            .iter()
            .filter(|r| r.overlap.region.fqn == "w")
            .map(|r| (r.overlap.region.nd_offsets.clone(), r.overlap.region.nd_lengths.clone()))
            .collect();
        regions.sort();
        assert_eq!(regions, vec![(vec![0, 0], vec![2, 4]), (vec![2, 0], vec![2, 4])]);
    }

    #[test]
    fn dp_replicas_share_one_read() {
        let model = ModelSpec {
            tensors: vec![tensor("w", &[8], None)],
            seed: 1,
        };
        let src = ShardingSpec::new(1, 1, 1, ZeroMode::None);
        let (_, meta) = plan_save(&all_layouts(&model, &src).unwrap(), &src).unwrap();
        let dst = ShardingSpec::new(1, 2, 1, ZeroMode::None);
        let plans = plan_load(&meta, &all_layouts(&model, &dst).unwrap(), &dst).unwrap();
        let model_reads: Vec<&ReadItem> = plans
            .values()
            .flat_map(|p| &p.reads)
            .filter(|r| r.overlap.region.fqn == "w")
            .collect();
        assert_eq!(model_reads.len(), 1);
        assert_eq!(model_reads[0].consumer_ranks, vec![0, 1]);
        for (_, readers) in readers_per_region(&plans) {
            assert_eq!(readers.len(), 1);
        }
    }

    #[test]
    fn missing_tensor_is_resharding_error() {
        let model = ModelSpec {
            tensors: vec![tensor("w", &[4], None)],
            seed: 1,
        };
        let spec = ShardingSpec::new(1, 1, 1, ZeroMode::None);
        let layouts = all_layouts(&model, &spec).unwrap();
        let (_, mut meta) = plan_save(&layouts, &spec).unwrap();
        meta.tensor_map.get_mut("w").unwrap()[0].shard.nd_lengths = vec![3];
        match plan_load(&meta, &layouts, &spec) {
            Err(Error::Resharding { fqn, offsets, .. }) => {
                assert_eq!(fqn, "w");
                assert_eq!(offsets, vec![3]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn cache_hits_skip_coordinator() {
        let model = ModelSpec {
            tensors: vec![tensor("w", &[8], None)],
            seed: 1,
        };
        let spec = ShardingSpec::new(1, 2, 1, ZeroMode::None);
        let layouts = all_layouts(&model, &spec).unwrap();
        let comm = Comm::for_world(2);
        let mut cache = PlanCache::new();
        let first = plan_with_cache(&mut cache, &comm, &model, &layouts, &spec).unwrap();
        assert!(!first.cache_hit);
        let before = comm.counters().planning_messages();
        assert_eq!(before, 2);
        let second = plan_with_cache(&mut cache, &comm, &model, &layouts, &spec).unwrap();
        assert!(second.cache_hit);
        assert_eq!(comm.counters().planning_messages(), before);
        assert_eq!(second.metadata, first.metadata);

        let spec4 = ShardingSpec::new(1, 4, 1, ZeroMode::None);
        let l4 = all_layouts(&model, &spec4).unwrap();
        let comm4 = Comm::for_world(4);
        assert!(!plan_with_cache(&mut cache, &comm4, &model, &l4, &spec4).unwrap().cache_hit);
        cache.clear();
        assert!(!plan_with_cache(&mut cache, &comm4, &model, &l4, &spec4).unwrap().cache_hit);
    }
}
