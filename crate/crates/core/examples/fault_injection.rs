//! A permanently failing upload leaves no COMPLETE marker, and loads refuse
//! the checkpoint.

use std::sync::Arc;

use ckpt_core::barrier::{read_failure_log, COMPLETE_MARKER};
use ckpt_core::comm::Comm;
use ckpt_core::engine::EngineConfig;
use ckpt_core::metrics::Recorder;
use ckpt_core::storage::{FaultyBackend, MemoryBackend, RetryPolicy, StorageBackend};
use ckpt_core::{load_checkpoint, Checkpointer, LoadOptions, ModelSpec, SaveOptions, ShardingSpec};

fn main() -> ckpt_core::Result<()> {
    let model = ModelSpec::from_json(include_bytes!("data/model.json"))?;
    let spec: ShardingSpec = "tp=2,dp=1,pp=4".parse()?;
    let faulty = Arc::new(FaultyBackend::new(MemoryBackend::new()));
    faulty.fail_writes_matching("model_3.bin", 2);
    faulty.fail_writes_permanently("optim_5.bin");
    let backend: Arc<dyn StorageBackend> = faulty.clone();

    let mut ck = Checkpointer::new(model, spec)?.with_engine(EngineConfig {
        retry: RetryPolicy {
            max_retries: 3,
            base_backoff: std::time::Duration::from_millis(5),
        },
        ..EngineConfig::default()
    })?;
    let state = ck.synthetic_state(7)?;
    let out = ck.save(&state, backend.clone(), &SaveOptions::new("step-7"))?.wait();
    println!("resolution: {:?}", out.resolution);
    println!("injected write failures: {}", faulty.failed_writes());
    println!("marker present: {}", backend.exists(COMPLETE_MARKER));
    for f in read_failure_log(backend.as_ref()) {
        println!("failure log: rank {} at {}: {}", f.rank, f.stage, f.reason);
    }

    let err = load_checkpoint(
        backend,
        "step-7",
        &spec,
        &LoadOptions::default(),
        &Comm::for_world(spec.world_size()),
        &Arc::new(Recorder::new()),
    )
    .unwrap_err();
    println!("load refused [{}]: {err}", err.category());
    Ok(())
}
