use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;
use std::thread;
use std::time::Instant;

use crossbeam_channel::{bounded, unbounded};

use super::{EngineConfig, PipelineReport};
use crate::comm::ExchangeEndpoint;
use crate::error::{Error, Result};
use crate::geometry::{copy_region, flat_index, region_flat_span, unflatten, volume};
use crate::metadata::ShardMeta;
use crate::metrics::Recorder;
use crate::planner::{LoadPlan, ReadItem};
use crate::storage::StorageBackend;

/// Reconstructed bytes of every wanted shard of one rank.
pub type LoadedShards = BTreeMap<ShardMeta, Vec<u8>>;

#[derive(Debug)]
pub struct LoadContext {
    pub checkpoint_id: String,
    pub backend: Arc<dyn StorageBackend>,
    pub config: Arc<EngineConfig>,
    pub recorder: Arc<Recorder>,
    pub endpoint: ExchangeEndpoint,
}

/// Byte range of the stored file covering `item`'s region.
fn read_range(item: &ReadItem) -> (u64, u64, u64) {
    let elem = item.entry.basic.dtype.element_size() as u64;
    let (first, last) = region_flat_span(
        &item.entry.shard.nd_lengths,
        &item.overlap.src_rel_offsets,
        &item.overlap.region.nd_lengths,
    );
    (item.entry.byte.byte_offset + first * elem, (last - first) * elem, first)
}

/// Pulls the region out of a contiguous span of the stored shard that starts
/// at flat element `first`.
fn extract(span: &[u8], first: u64, item: &ReadItem, elem: usize) -> Vec<u8> {
    let shard = &item.entry.shard.nd_lengths;
    let rel = &item.overlap.src_rel_offsets;
    let region = &item.overlap.region.nd_lengths;
    let axes = region.len();
    let row = region[axes - 1] as usize * elem;
    let outer = &region[..axes - 1];
    let mut out = Vec::with_capacity(volume(region) as usize * elem);
    for r in 0..volume(outer) {
        let mut c = unflatten(outer, r);
        c.iter_mut().zip(rel).for_each(|(x, o)| *x += o);
        c.push(rel[axes - 1]);
        let s = (flat_index(shard, &c) - first) as usize * elem;
        out.extend_from_slice(&span[s..s + row]);
    }
    out
}

fn place(buffers: &mut LoadedShards, item: &ReadItem, rank: u32, region: &[u8]) {
    let elem = item.entry.basic.dtype.element_size();
    let lengths = &item.overlap.region.nd_lengths;
    let zeros = vec![0; lengths.len()];
    for t in item.targets.iter().filter(|t| t.rank == rank) {
        let dst = buffers.get_mut(&t.wanted).expect("target shard allocated");
        copy_region(region, lengths, &zeros, dst, &t.wanted.nd_lengths, &t.dst_rel_offsets, lengths, elem);
    }
}

/// Runs one rank's load: concurrent range reads, deserialization into
/// regions, copies into the wanted shards, and exchange of regions other
/// replicas consume.
pub fn execute_load(plan: &LoadPlan, ctx: LoadContext) -> Result<(LoadedShards, PipelineReport)> {
    let started = Instant::now();
    let rank = plan.rank;
    let cfg = ctx.config.clone();
    cfg.validate()?;
    let rec = ctx.recorder.clone();
    let id = ctx.checkpoint_id.clone();
    let load_span = rec.span(rank, "load").attr("checkpoint_id", &id);

    let mut buffers: LoadedShards = plan
        .wanted
        .iter()
        .map(|(s, b)| (s.clone(), vec![0u8; (s.numel() * b.dtype.element_size() as u64) as usize]))
        .collect();

    let (job_tx, job_rx) = unbounded::<usize>();
    let (raw_tx, raw_rx) = bounded::<Result<(usize, Vec<u8>, u64)>>(cfg.queue_depth);
    let (reg_tx, reg_rx) = bounded::<Result<(usize, Arc<Vec<u8>>)>>(cfg.queue_depth);
    for i in 0..plan.reads.len() {
        job_tx.send(i).expect("receiver alive");
    }
    drop(job_tx);

    let reads = Arc::new(plan.reads.clone());
    let mut workers = Vec::new();
    for _ in 0..cfg.read_workers {
        let (rx, tx, reads, rec, cfg, id) = (job_rx.clone(), raw_tx.clone(), reads.clone(), rec.clone(), cfg.clone(), id.clone());
        let backend = ctx.backend.clone();
        workers.push(thread::spawn(move || {
            for i in rx {
                let item = &reads[i];
                let (offset, len, first) = read_range(item);
                let file = &item.entry.byte.file_name;
                let _s = rec
                    .span(rank, "read")
                    .bytes(len)
                    .attr("checkpoint_id", &id)
                    .attr("file", file);
                cfg.latency.apply("read", len);
                let res = if offset + len > item.entry.byte.byte_offset + item.entry.byte.byte_length {
                    Err(Error::Read {
                        file: file.clone(),
                        offset,
                        reason: "range exceeds the stored shard".into(),
                    })
                } else {
                    let (r, _) = cfg.retry.run(|| ctx_read(&*backend, file, offset, len));
                    r
                };
                let failed = res.is_err();
                if tx.send(res.map(|bytes| (i, bytes, first))).is_err() || failed {
                    return;
                }
            }
        }));
    }
    drop((job_rx, raw_tx));
    for _ in 0..cfg.serialize_workers {
        let (rx, tx, reads, rec, cfg, id) = (raw_rx.clone(), reg_tx.clone(), reads.clone(), rec.clone(), cfg.clone(), id.clone());
        workers.push(thread::spawn(move || {
            for msg in rx {
                let out = msg.map(|(i, span, first)| {
                    let item = &reads[i];
                    let elem = item.entry.basic.dtype.element_size();
                    let _s = rec.span(rank, "deserialize").bytes(item.region_bytes()).attr("checkpoint_id", &id);
                    cfg.latency.apply("deserialize", item.region_bytes());
                    (i, Arc::new(extract(&span, first, item, elem)))
                });
                if tx.send(out).is_err() {
                    return;
                }
            }
        }));
    }
    drop((raw_rx, reg_tx));

    let mut first_error = None;
    for msg in reg_rx {
        let (i, region) = match msg {
            Ok(v) => v,
            Err(e) => {
                first_error = Some(e);
                break;
            }
        };
        let item = &plan.reads[i];
        {
            let _s = rec.span(rank, "copy").bytes(region.len() as u64).attr("checkpoint_id", &id);
            cfg.latency.apply("copy", region.len() as u64);
            place(&mut buffers, item, rank, &region);
        }
        for &peer in item.consumer_ranks.iter().filter(|r| **r != rank) {
            let _s = rec
                .span(rank, "exchange")
                .bytes(region.len() as u64)
                .attr("checkpoint_id", &id)
                .attr("peer", peer);
            cfg.latency.apply("exchange", region.len() as u64);
            if let Err(e) = ctx.endpoint.send(peer, item.id, region.clone()) {
                first_error.get_or_insert(e);
            }
        }
    }
    for w in workers {
        w.join().expect("load worker panicked");
    }
    if let Some(e) = first_error {
        return Err(e);
    }

    let mut pending: BTreeMap<usize, &ReadItem> = plan.incoming.iter().map(|i| (i.id, i)).collect();
    while !pending.is_empty() {
        let waiting_on: BTreeSet<u32> = pending.values().map(|i| i.reader_rank).collect();
        let _s = rec.span(rank, "exchange").attr("checkpoint_id", &id);
        let msg = ctx.endpoint.recv(&waiting_on)?;
        let Some(item) = pending.remove(&msg.item_id) else {
            return Err(Error::Integrity(format!(
                "rank {rank} received unexpected region {} from rank {}",
                msg.item_id, msg.from
            )));
        };
        if msg.bytes.len() as u64 != item.region_bytes() {
            return Err(Error::Integrity(format!(
                "region {} from rank {} has {} bytes, expected {}",
                item.id,
                msg.from,
                msg.bytes.len(),
                item.region_bytes()
            )));
        }
        drop(_s);
        let _c = rec.span(rank, "copy").bytes(msg.bytes.len() as u64).attr("checkpoint_id", &id);
        place(&mut buffers, item, rank, &msg.bytes);
    }
    drop(load_span);

    let elapsed = started.elapsed();
    let spans = rec
        .spans_where("checkpoint_id", &id)
        .into_iter()
        .filter(|s| s.rank == rank)
        .collect();
    Ok((
        buffers,
        PipelineReport {
            spans,
            blocking_time: elapsed,
            end_to_end: elapsed,
        },
    ))
}

fn ctx_read(backend: &dyn StorageBackend, file: &str, offset: u64, len: u64) -> Result<Vec<u8>> {
    let bytes = backend.read_range(file, offset, len).map_err(|e| match e {
        Error::Read { .. } => e,
        other => Error::Read {
            file: file.to_string(),
            offset,
            reason: other.to_string(),
        },
    })?;
    if bytes.len() as u64 != len {
        return Err(Error::Read {
            file: file.to_string(),
            offset,
            reason: format!("short read: {} of {len} bytes", bytes.len()),
        });
    }
    Ok(bytes)
}
