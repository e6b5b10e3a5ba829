//! Per-rank save-time breakdown for a 16-rank job, plus ETTR.

use std::sync::Arc;

use ckpt_core::engine::{EngineConfig, StageLatency};
use ckpt_core::metrics::{ettr, export_heatmap, heatmap_csv, EttrInputs};
use ckpt_core::storage::{MemoryBackend, StorageBackend};
use ckpt_core::{Checkpointer, ModelSpec, SaveOptions, ShardingSpec};

fn main() -> ckpt_core::Result<()> {
    let mut model = ModelSpec::from_json(include_bytes!("data/model.json"))?;
    model.tensors.iter_mut().for_each(|t| t.pp_stage = t.pp_stage.min(1));
    let spec: ShardingSpec = "tp=2,dp=4,pp=2".parse()?;
    let mut ck = Checkpointer::new(model, spec)?.with_engine(EngineConfig {
        latency: StageLatency::zero().with("upload", 1.0, 0.0),
        ..EngineConfig::default()
    })?;
    let state = ck.synthetic_state(1)?;
    let backend: Arc<dyn StorageBackend> = Arc::new(MemoryBackend::new());
    let out = ck.save(&state, backend, &SaveOptions::new("heat"))?.wait();

    let rows = export_heatmap(&out.report.spans, Some("loader_upload"))?;
    let ranks: Vec<u32> = rows.iter().map(|r| r.rank).collect();
    println!("ranks uploading dataloader state: {ranks:?}");
    print!("{}", heatmap_csv(&export_heatmap(&out.report.spans, None)?));

    let t_save = out.report.end_to_end.as_secs_f64();
    for n in [10.0, 100.0, 1000.0] {
        let e = ettr(EttrInputs {
            t_save,
            t_load: 2.0 * t_save,
            n,
            t_iter: 0.5,
        })?;
        println!("interval {n:>5} iterations: wasted {:.3}s per failure, ETTR {:.4}", e.t_wasted, e.ettr);
    }
    Ok(())
}
