//! A scripted session: five checkpoints, one of them broken by a failing
//! rank, then a resharded restart from the newest complete checkpoint.

use std::sync::Arc;

use ckpt_core::metrics::Recorder;
use ckpt_core::scenario::{run_scenario, Scenario};

fn main() -> ckpt_core::Result<()> {
    let scenario = Scenario::from_json(include_bytes!("data/scenario.json"))?;
    let report = run_scenario(&scenario, "demo", Arc::new(Recorder::new()))?;
    for c in &report.checkpoints {
        println!(
            "{:<16} {:<28} cache_hit={:<5} blocking {:>7.2} ms, end-to-end {:>7.2} ms",
            c.checkpoint_id, c.status, c.cache_hit, c.blocking_ms, c.end_to_end_ms
        );
    }
    if let Some(load) = &report.load {
        println!(
            "restart from {} into {}: verified={} in {:.2} ms",
            load.checkpoint_id, load.target, load.verified, load.end_to_end_ms
        );
    }
    if let Some(e) = report.ettr {
        println!("ETTR {:.4} (wasted {:.3} s per failure)", e.ettr, e.t_wasted);
    }
    println!("coordinator messages during saves: {}", report.save_comm.planning_messages());
    Ok(())
}
