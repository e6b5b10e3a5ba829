//! Large files on an append-only remote store: parallel part uploads, one
//! concat, then parallel range reads.

use std::time::{Duration, Instant};

use ckpt_core::storage::{
    chunked_write, parallel_range_read, ChunkedRemoteBackend, ChunkedRemoteConfig, ChunkedWriteConfig, ConcatMode,
    RetryPolicy, StorageBackend,
};

fn main() -> ckpt_core::Result<()> {
    let dir = std::env::temp_dir().join(format!("ckpt-chunked-{}", std::process::id()));
    let payload: Vec<u8> = (0..3_000_000u32).map(|i| (i % 251) as u8).collect();

    for mode in [ConcatMode::Serial, ConcatMode::Parallel] {
        let _ = std::fs::remove_dir_all(&dir);
        let remote = ChunkedRemoteBackend::open(
            &dir,
            ChunkedRemoteConfig {
                data_latency: Duration::from_millis(5),
                metadata_latency: Duration::from_millis(2),
                concat_mode: mode,
                max_single_write: Some(1 << 20),
            },
        )?;
        let t = Instant::now();
        let report = chunked_write(
            &remote,
            "model_0.bin",
            &payload,
            &ChunkedWriteConfig {
                chunk_size: 256 << 10,
                max_parallel_parts: 8,
            },
            &RetryPolicy::default(),
        )?;
        println!(
            "{mode:?} concat: {} parts, peak {} in flight, {:?}, counters {:?}",
            report.part_sizes.len(),
            report.max_in_flight,
            t.elapsed(),
            remote.counters()
        );
        println!("  visible files: {:?}", remote.list()?);

        let ranges: Vec<(u64, u64)> = (0..8).map(|i| (i * 300_000, 4096)).collect();
        let chunks = parallel_range_read(&remote, "model_0.bin", &ranges, 4)?;
        assert!(chunks
            .iter()
            .zip(&ranges)
            .all(|(c, (o, l))| c[..] == payload[*o as usize..(*o + *l) as usize]));
        println!("  {} range reads match the payload", chunks.len());
    }
    let _ = std::fs::remove_dir_all(&dir);
    Ok(())
}
