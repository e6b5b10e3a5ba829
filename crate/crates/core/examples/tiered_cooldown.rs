//! Aged checkpoints move to a cold tier but keep their names.

use std::sync::Arc;
use std::time::{Duration, SystemTime};

use ckpt_core::storage::{cool_down, MemoryBackend, StorageBackend, TieredBackend};

fn main() -> ckpt_core::Result<()> {
    let hot = Arc::new(MemoryBackend::new());
    let cold = Arc::new(MemoryBackend::new());
    let tiered = TieredBackend::new(hot.clone(), cold.clone(), Duration::from_secs(3600))?;

    let now = SystemTime::now();
    for (name, age_h) in [("step-100.bin", 30u64), ("step-200.bin", 5), ("step-300.bin", 0)] {
        tiered.write_file(name, name.as_bytes())?;
        hot.set_modified(name, now - Duration::from_secs(age_h * 3600))?;
    }
    let report = cool_down(&tiered, now)?;
    println!("migrated: {:?}", report.migrated);
    println!("hot tier: {:?}", hot.list()?);
    println!("cold tier: {:?}", cold.list()?);
    println!("through the tiered view: {:?}", tiered.list()?);
    println!(
        "step-100.bin still reads as {:?}",
        String::from_utf8_lossy(&tiered.read_file("step-100.bin")?)
    );
    Ok(())
}
