use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;
use std::time::Duration;

use super::StorageBackend;
use crate::error::{Error, Result};

const PART_MARKER: &str = ".part";

/// Name of the `index`-th sub-file of `target`.
pub fn part_name(target: &str, index: usize) -> String {
    format!("{target}{PART_MARKER}{index:05}")
}

pub fn is_part_name(name: &str) -> bool {
    name.rsplit_once(PART_MARKER)
        .is_some_and(|(head, idx)| !head.is_empty() && !idx.is_empty() && idx.bytes().all(|b| b.is_ascii_digit()))
}

/// Exponential-backoff retry for storage operations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 3,
            base_backoff: Duration::from_millis(50),
        }
    }
}

impl RetryPolicy {
    pub fn none() -> Self {
        Self {
            max_retries: 0,
            base_backoff: Duration::ZERO,
        }
    }

    /// Runs `op` until it succeeds or retries are exhausted. Returns the
    /// value and the number of attempts made.
    pub fn run<T>(&self, mut op: impl FnMut() -> Result<T>) -> (Result<T>, u32) {
        let mut attempt = 0;
        loop {
            attempt += 1;
            match op() {
                Ok(v) => return (Ok(v), attempt),
                Err(e) if attempt > self.max_retries => return (Err(e), attempt),
                Err(_) => thread::sleep(self.base_backoff * 2u32.pow(attempt - 1)),
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChunkedWriteConfig {
    pub chunk_size: u64,
    pub max_parallel_parts: usize,
}

impl Default for ChunkedWriteConfig {
    fn default() -> Self {
        Self {
            chunk_size: 4 << 20,
            max_parallel_parts: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChunkedWriteReport {
    pub part_sizes: Vec<u64>,
    pub attempts: u32,
    pub max_in_flight: usize,
}

/// Uploads `bytes` as fixed-size sub-files in parallel, then merges them
/// into `file_name` with a backend concat.
pub fn chunked_write(
    backend: &dyn StorageBackend,
    file_name: &str,
    bytes: &[u8],
    cfg: &ChunkedWriteConfig,
    retry: &RetryPolicy,
) -> Result<ChunkedWriteReport> {
    if cfg.chunk_size == 0 || cfg.max_parallel_parts == 0 {
        return Err(Error::Config("chunk_size and max_parallel_parts must be positive".into()));
    }
    if !backend.capabilities().supports_concat {
        return Err(Error::Precondition(format!("{backend:?} does not support concat")));
    }
    if bytes.is_empty() {
        let (res, attempts) = retry.run(|| backend.write_file(file_name, bytes));
        res?;
        return Ok(ChunkedWriteReport {
            part_sizes: Vec::new(),
            attempts,
            max_in_flight: 1,
        });
    }

    let chunks: Vec<&[u8]> = bytes.chunks(cfg.chunk_size as usize).collect();
    let names: Vec<String> = (0..chunks.len()).map(|i| part_name(file_name, i)).collect();
    let next = AtomicUsize::new(0);
    let in_flight = AtomicUsize::new(0);
    let peak = AtomicUsize::new(0);
    let attempts = AtomicUsize::new(0);
    let first_error: Mutex<Option<Error>> = Mutex::new(None);
    let workers = cfg.max_parallel_parts.min(chunks.len());

    thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= chunks.len() || first_error.lock().unwrap().is_some() {
                    break;
                }
                let now = in_flight.fetch_add(1, Ordering::SeqCst) + 1;
                peak.fetch_max(now, Ordering::SeqCst);
                let (res, n) = retry.run(|| backend.write_file(&names[i], chunks[i]));
                in_flight.fetch_sub(1, Ordering::SeqCst);
                attempts.fetch_add(n as usize, Ordering::Relaxed);
                if let Err(e) = res {
                    first_error.lock().unwrap().get_or_insert(e);
                    break;
                }
            });
        }
    });
    if let Some(e) = first_error.into_inner().unwrap() {
        return Err(e);
    }
    backend.concat(&names, file_name)?;
    Ok(ChunkedWriteReport {
        part_sizes: chunks.iter().map(|c| c.len() as u64).collect(),
        attempts: attempts.into_inner() as u32,
        max_in_flight: peak.into_inner(),
    })
}

/// Reads several byte ranges of one file concurrently; results follow the
/// order of `ranges`.
pub fn parallel_range_read(
    backend: &dyn StorageBackend,
    file_name: &str,
    ranges: &[(u64, u64)],
    threads: usize,
) -> Result<Vec<Vec<u8>>> {
    if !backend.capabilities().supports_range_read {
        return Err(Error::Precondition(format!("{backend:?} does not support range reads")));
    }
    let len = backend.stat(file_name)?.len;
    if let Some((o, l)) = ranges
        .iter()
        .find(|(o, l)| o.checked_add(*l).is_none_or(|end| end > len))
    {
        return Err(Error::Range(format!(
            "`{file_name}`: range ({o}, {l}) outside file of {len} bytes"
        )));
    }
    let results: Vec<Mutex<Option<Result<Vec<u8>>>>> = ranges.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    thread::scope(|s| {
        for _ in 0..threads.max(1).min(ranges.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(&(o, l)) = ranges.get(i) else { break };
                *results[i].lock().unwrap() = Some(backend.read_range(file_name, o, l));
            });
        }
    });
    results
        .into_iter()
        .map(|m| m.into_inner().unwrap().expect("every range is read"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::storage::{FaultyBackend, MemoryBackend};

    #[test]
    fn part_names() {
        assert_eq!(part_name("model_0.bin", 3), "model_0.bin.part00003");
        assert!(is_part_name("model_0.bin.part00003"));
        assert!(!is_part_name("model_0.bin"));
        assert!(!is_part_name(".part1"));
        assert!(!is_part_name("x.partial"));
    }

    #[test]
    fn ten_bytes_in_chunks_of_four() {
        let b = MemoryBackend::new();
        let payload: Vec<u8> = (0..10).collect();
        let cfg = ChunkedWriteConfig {
            chunk_size: 4,
            max_parallel_parts: 8,
        };
        let rep = chunked_write(&b, "f", &payload, &cfg, &RetryPolicy::none()).unwrap();
        assert_eq!(rep.part_sizes, vec![4, 4, 2]);
        assert_eq!(b.read_file("f").unwrap(), payload);
        assert_eq!(b.list().unwrap(), vec!["f".to_string()]);
    }

    #[test]
    fn large_chunk_gives_one_part() {
        let b = MemoryBackend::new();
        let cfg = ChunkedWriteConfig {
            chunk_size: 64,
            max_parallel_parts: 2,
        };
        let rep = chunked_write(&b, "f", b"short", &cfg, &RetryPolicy::none()).unwrap();
        assert_eq!(rep.part_sizes, vec![5]);
    }

    #[test]
    fn in_flight_parts_are_bounded() {
        let b = MemoryBackend::new();
        let payload = vec![7u8; 1000];
        let cfg = ChunkedWriteConfig {
            chunk_size: 10,
            max_parallel_parts: 3,
        };
        let rep = chunked_write(&b, "f", &payload, &cfg, &RetryPolicy::none()).unwrap();
        assert!(rep.max_in_flight <= 3);
        assert_eq!(rep.part_sizes.len(), 100);
    }

    #[test]
    fn requires_concat_capability() {
        let b = MemoryBackend::with_capabilities(crate::storage::Capabilities {
            supports_range_read: true,
            supports_concat: false,
        });
        let err = chunked_write(&b, "f", b"x", &ChunkedWriteConfig::default(), &RetryPolicy::none()).unwrap_err();
        assert!(matches!(err, Error::Precondition(_)));
    }

    #[test]
    fn transient_part_failure_is_retried() {
        let b = FaultyBackend::new(MemoryBackend::new());
        b.fail_writes_matching(".part00001", 2);
        let policy = RetryPolicy {
            max_retries: 3,
            base_backoff: Duration::from_millis(1),
        };
        let cfg = ChunkedWriteConfig {
            chunk_size: 2,
            max_parallel_parts: 2,
        };
        let rep = chunked_write(&b, "f", b"abcdef", &cfg, &policy).unwrap();
        assert_eq!(rep.attempts, 5);
        assert_eq!(b.read_file("f").unwrap(), b"abcdef");
    }

    #[test]
    fn range_reads_follow_request_order() {
        let b = MemoryBackend::new();
        let payload: Vec<u8> = (0..=255).collect();
        b.write_file("f", &payload).unwrap();
        let ranges = vec![(200, 56), (0, 100), (100, 100)];
        let parts = parallel_range_read(&b, "f", &ranges, 4).unwrap();
        assert_eq!(parts[0], &payload[200..]);
        assert_eq!(parts[1], &payload[..100]);
        let whole = parallel_range_read(&b, "f", &[(0, 256)], 4).unwrap();
        assert_eq!(whole[0], payload);
        let overlapping = parallel_range_read(&b, "f", &[(0, 10), (5, 10)], 2).unwrap();
        assert_eq!(overlapping[1], &payload[5..15]);
        assert!(matches!(parallel_range_read(&b, "f", &[(250, 7)], 1), Err(Error::Range(_))));
    }
}
