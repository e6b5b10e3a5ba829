//! Save a ZeRO-sharded job and load it back under three other layouts.

use std::sync::Arc;

use ckpt_core::comm::Comm;
use ckpt_core::metrics::Recorder;
use ckpt_core::storage::{MemoryBackend, StorageBackend};
use ckpt_core::{load_checkpoint, Checkpointer, LoadOptions, ModelSpec, SaveOptions, ShardingSpec};

fn main() -> ckpt_core::Result<()> {
    let model = ModelSpec::from_json(include_bytes!("data/model.json"))?;
    let source: ShardingSpec = "tp=2,dp=2,pp=4,zero".parse()?;
    let backend: Arc<dyn StorageBackend> = Arc::new(MemoryBackend::new());

    let mut ck = Checkpointer::new(model, source)?;
    let state = ck.synthetic_state(1000)?;
    let saved = ck.save(&state, backend.clone(), &SaveOptions::new("step-1000"))?.wait();
    println!(
        "saved {} ranks under {source}: {:?}, blocked {:?}, done after {:?}",
        source.world_size(),
        saved.resolution,
        saved.report.blocking_time,
        saved.report.end_to_end
    );

    for target in ["tp=1,dp=1,pp=4", "tp=4,dp=2,pp=4,zero", "tp=2,dp=4,pp=4"] {
        let target: ShardingSpec = target.parse()?;
        let comm = Comm::for_world(target.world_size());
        let loaded = load_checkpoint(
            backend.clone(),
            "step-1000",
            &target,
            &LoadOptions::default(),
            &comm,
            &Arc::new(Recorder::new()),
        )?;
        loaded.verify()?;
        let reads: usize = loaded.plans.values().map(|p| p.reads.len()).sum();
        let exchanged: usize = loaded.plans.values().map(|p| p.incoming.len()).sum();
        println!("loaded into {target}: {reads} region reads, {exchanged} exchanged regions, bitwise verified");
    }
    Ok(())
}
