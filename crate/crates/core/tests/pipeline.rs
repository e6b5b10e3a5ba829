mod common;

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Duration;

use ckpt_core::engine::{EngineConfig, StageLatency};
use ckpt_core::metadata::Dtype;
use ckpt_core::metrics::{export_heatmap, Recorder, Span};
use ckpt_core::{Checkpointer, ModelSpec, SaveOptions, ShardingSpec, TensorSpec};
use common::memory;

fn model(stages: u32) -> ModelSpec {
    ModelSpec {
        tensors: (0..4)
            .map(|i| TensorSpec {
                fqn: format!("block{i}.w"),
                global_shape: vec![8, 16],
                dtype: Dtype::F32,
                tp_shard_axis: Some(1),
                pp_stage: i % stages,
            })
            .collect(),
        seed: 3,
    }
}

fn checkpointer(spec: &str, latency: StageLatency, delay: BTreeMap<u32, Duration>) -> (Checkpointer, Arc<Recorder>) {
    let spec: ShardingSpec = spec.parse().unwrap();
    let recorder = Arc::new(Recorder::new());
    let ck = Checkpointer::new(model(spec.pp), spec)
        .unwrap()
        .with_engine(EngineConfig {
            latency,
            rank_upload_delay: delay,
            ..EngineConfig::default()
        })
        .unwrap()
        .with_recorder(recorder.clone());
    (ck, recorder)
}

fn of<'a>(spans: &'a [Span], id: &str, rank: u32, phase: &str) -> Vec<&'a Span> {
    spans
        .iter()
        .filter(|s| s.rank == rank && s.phase == phase && s.attributes.get("checkpoint_id").map(String::as_str) == Some(id))
        .collect()
}

#[test]
fn training_only_waits_for_the_snapshot() {
    let (mut ck, _) = checkpointer("tp=2,dp=1,pp=1", StageLatency::zero().with("upload", 40.0, 0.0), BTreeMap::new());
    let state = ck.synthetic_state(1).unwrap();
    let handle = ck.save(&state, memory(), &SaveOptions::new("c")).unwrap();
    let blocking = handle.blocking_time();
    assert!(handle.barrier().try_resolution().is_none());
    let out = handle.wait();
    assert!(out.resolution.is_complete());
    assert!(blocking < Duration::from_millis(40), "{blocking:?}");
    assert!(out.report.end_to_end >= Duration::from_millis(40));
}

#[test]
fn slow_rank_delays_completion_not_training() {
    let lat = StageLatency::zero().with("upload", 2.0, 0.0);
    let (mut fast, _) = checkpointer("tp=1,dp=2,pp=1", lat.clone(), BTreeMap::new());
    let (mut slow, _) = checkpointer("tp=1,dp=2,pp=1", lat, BTreeMap::from([(1, Duration::from_millis(500))]));
    let state = fast.synthetic_state(1).unwrap();
    let a = fast.save(&state, memory(), &SaveOptions::new("a")).unwrap();
    let b = slow.save(&state, memory(), &SaveOptions::new("b")).unwrap();
    let (ba, bb) = (a.blocking_time(), b.blocking_time());
    let (oa, ob) = (a.wait(), b.wait());
    assert!(oa.resolution.is_complete() && ob.resolution.is_complete());
    assert!(bb < Duration::from_millis(100), "slow rank leaked into blocking time: {bb:?} vs {ba:?}");
    assert!(ob.report.end_to_end >= Duration::from_millis(500));
    assert!(oa.report.end_to_end < Duration::from_millis(500));
}

#[test]
fn snapshot_buffer_is_not_reused_while_uploading() {
    let lat = StageLatency::zero().with("upload", 15.0, 0.0);
    let (mut ck, rec) = checkpointer("tp=2,dp=1,pp=1", lat, BTreeMap::new());
    let state = ck.synthetic_state(1).unwrap();
    let handles: Vec<_> = ["c0", "c1", "c2"]
        .iter()
        .map(|id| ck.save(&state, memory(), &SaveOptions::new(*id)).unwrap())
        .collect();
    for h in handles {
        assert!(h.wait().resolution.is_complete());
    }
    let spans = rec.spans();
    for rank in 0..2 {
        let buffer = |id: &str| of(&spans, id, rank, "snapshot")[0].attributes["buffer"].clone();
        assert_eq!(buffer("c0"), buffer("c2"));
        assert_ne!(buffer("c0"), buffer("c1"));
        let c0_io_end = ["upload", "concat"]
            .iter()
            .flat_map(|p| of(&spans, "c0", rank, p))
            .map(|s| s.end_us)
            .max()
            .unwrap();
        let c2_first_snapshot = of(&spans, "c2", rank, "snapshot").iter().map(|s| s.start_us).min().unwrap();
        assert!(c2_first_snapshot >= c0_io_end, "rank {rank} overwrote a buffer still being uploaded");
    }
}

#[test]
fn stage_spans_nest_inside_the_rank_save() {
    let (mut ck, rec) = checkpointer("tp=2,dp=2,pp=2", StageLatency::zero().with("dump", 1.0, 0.0), BTreeMap::new());
    let state = ck.synthetic_state(1).unwrap();
    assert!(ck.save(&state, memory(), &SaveOptions::new("n")).unwrap().wait().resolution.is_complete());
    let spans = rec.spans();
    for rank in 0..8 {
        let outer = of(&spans, "n", rank, "save");
        assert_eq!(outer.len(), 1);
        for phase in ["snapshot", "serialize", "dump", "upload", "loader_upload", "concat"] {
            for s in of(&spans, "n", rank, phase) {
                assert!(outer[0].contains(s), "rank {rank} {phase} escapes its save span");
            }
        }
        assert!(!of(&spans, "n", rank, "upload").is_empty());
    }
}

#[test]
fn loader_uploads_come_from_loader_holders_only() {
    let (mut ck, rec) = checkpointer("tp=2,dp=4,pp=2", StageLatency::zero(), BTreeMap::new());
    let state = ck.synthetic_state(1).unwrap();
    assert!(ck.save(&state, memory(), &SaveOptions::new("h")).unwrap().wait().resolution.is_complete());
    let rows = export_heatmap(&rec.spans(), Some("loader_upload")).unwrap();
    let ranks: Vec<u32> = rows.iter().map(|r| r.rank).collect();
    // tp varies fastest, so the tp=0, pp=0 ranks are every second rank of stage 0
    assert_eq!(ranks, vec![0, 2, 4, 6]);
    assert!(rows.iter().all(|r| r.io_bytes > 0));
    assert!(export_heatmap(&rec.spans(), Some("bogus")).is_err());
}

#[test]
fn stages_overlap_across_items() {
    let lat = StageLatency::zero()
        .with("serialize", 5.0, 0.0)
        .with("dump", 5.0, 0.0)
        .with("upload", 20.0, 0.0);
    let (mut ck, _) = checkpointer("tp=1,dp=1,pp=1", lat, BTreeMap::new());
    let state = ck.synthetic_state(1).unwrap();
    let out = ck.save(&state, memory(), &SaveOptions::new("o")).unwrap().wait();
    // 8 tensor items plus 3 blobs, each paying 30 ms if run back to back
    let serial = Duration::from_millis(30 * 11);
    assert!(out.report.end_to_end < serial.mul_f64(0.9), "{:?}", out.report.end_to_end);
}
