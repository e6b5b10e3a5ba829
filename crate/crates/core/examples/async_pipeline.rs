//! Injected stage latencies show how little of a save blocks training.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Duration;

use ckpt_core::barrier::{async_barrier, BarrierTicket};
use ckpt_core::comm::Comm;
use ckpt_core::engine::{execute_save, EngineConfig, SaveContext, SaveInput, SnapshotPool, StageLatency};
use ckpt_core::metadata::{BasicMeta, Dtype, ShardMeta};
use ckpt_core::metrics::Recorder;
use ckpt_core::planner::{SavePlan, WriteItem, WriteSource};
use ckpt_core::storage::{MemoryBackend, StorageBackend};

fn main() -> ckpt_core::Result<()> {
    let latency: StageLatency = serde_json::from_slice(include_bytes!("data/latency.json")).expect("valid latency file");
    let engine = Arc::new(EngineConfig {
        latency,
        ..EngineConfig::default()
    });

    let mut tensors = BTreeMap::new();
    let mut items = Vec::new();
    for i in 0..6 {
        let fqn = format!("w{i}");
        let shard = ShardMeta::full(&fqn, &[256]);
        tensors.insert(shard.clone(), vec![i as u8; 1024]);
        items.push(WriteItem {
            basic: BasicMeta::new(&fqn, vec![256], Dtype::F32, "sim-gpu:0"),
            shard,
            source: WriteSource::Model,
            assigned_rank: 0,
        });
    }
    let plan = SavePlan {
        rank: 0,
        items,
        blobs: Vec::new(),
        model_file: "model_0.bin".into(),
        optim_file: "optim_0.bin".into(),
    };

    let backend: Arc<dyn StorageBackend> = Arc::new(MemoryBackend::new());
    let recorder = Arc::new(Recorder::new());
    let (reporter, barrier) = async_barrier(
        BarrierTicket::new("demo", 1, Duration::from_secs(5)),
        Arc::new(Comm::for_world(1)),
        backend.clone(),
        Box::new(|_: &dyn StorageBackend| Ok(())),
    );
    let blobs = BTreeMap::new();
    let handle = execute_save(
        SaveInput {
            plan: &plan,
            tensors: &tensors,
            blobs: &blobs,
        },
        SaveContext {
            checkpoint_id: "demo".into(),
            backend,
            config: engine.clone(),
            pool: Arc::new(SnapshotPool::new()),
            recorder: recorder.clone(),
            reporter: Some(reporter),
        },
    )?;
    let blocking = handle.blocking_time;
    let started = handle.started_at;
    println!("training resumed after {blocking:?}");
    handle.wait();
    println!("barrier: {:?}", barrier.wait());
    let e2e = barrier.resolved_at().expect("resolved") - started;

    let serial: Duration = ["snapshot", "serialize", "dump", "upload"]
        .iter()
        .map(|s| engine.latency.cost(s, 1024) * plan.items.len() as u32)
        .sum();
    println!("end to end {e2e:?} vs {serial:?} if the stages ran back to back");
    for s in recorder.spans().iter().filter(|s| s.phase == "upload") {
        println!("  upload {} {}..{} us", s.attributes["file"], s.start_us, s.end_us);
    }
    Ok(())
}
