//! Dataloader state follows DP changes, and prefetching hides its cost.

use std::time::Duration;

use ckpt_core::loader::{
    prefetch_states, reshard_loader, synchronous_gather_delay, synthetic_sharded_state, StateQueue,
};

fn main() -> ckpt_core::Result<()> {
    let states: Vec<_> = (0..4).map(|dp| synthetic_sharded_state(9, dp, 500)).collect();
    let before: usize = states.iter().map(|s| s.token_buffer.len()).sum();
    for target in [2, 3, 8] {
        let out = reshard_loader(&states, target, false)?;
        let sizes: Vec<usize> = out.iter().map(|s| s.token_buffer.len()).collect();
        println!("dp 4 -> {target}: buffer sizes {sizes:?} (total {before})");
    }

    let workers = 4;
    let prep = Duration::from_secs(2);
    let queue = StateQueue::new(workers);
    for w in 0..workers {
        // read workers push their state as soon as the step is reached
        queue.push(w, 500, synthetic_sharded_state(9, w as u32, 500))?;
    }
    let outcome = prefetch_states(&queue, 500, prep, |w, step| synthetic_sharded_state(9, w as u32, step));
    println!(
        "prefetched {}/{workers} workers, gather delay {:?} vs {:?} synchronously",
        outcome.prefetched_workers,
        outcome.gather_delay,
        synchronous_gather_delay(workers, prep)
    );
    Ok(())
}
