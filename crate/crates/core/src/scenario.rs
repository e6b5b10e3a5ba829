//! Multi-checkpoint training sessions driven by a JSON script.
//!
//! ```json
//! {
//!   "model": { "tensors": [...], "seed": 7 },
//!   "parallel": "tp=2,dp=2,pp=1",
//!   "reshard_to": "tp=1,dp=4,pp=1",
//!   "iterations": 400,
//!   "checkpoint_interval": 100,
//!   "t_iter_ms": 5.0,
//!   "latency": { "upload": { "fixed_ms": 2.0 } },
//!   "failures": [ { "checkpoint": 2, "rank": 1 } ],
//!   "kill_ranks": []
//! }
//! ```
//!
//! Each checkpoint goes to its own in-memory store. A failure entry makes the
//! given rank's uploads fail permanently for that checkpoint. After the last
//! step the newest complete checkpoint is loaded into `reshard_to` (or the
//! training spec) and verified.

use std::collections::BTreeSet;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::barrier::Resolution;
use crate::checkpoint::{load_checkpoint, Checkpointer, LoadOptions, SaveOptions};
use crate::comm::{Comm, CommCounters};
use crate::engine::{EngineConfig, StageLatency};
use crate::error::{Error, Result};
use crate::metrics::{ettr, Ettr, EttrInputs, Recorder};
use crate::planner::{model_file_name, optim_file_name};
use crate::sharding::{ModelSpec, ShardingSpec};
use crate::storage::{FaultyBackend, MemoryBackend, RetryPolicy, StorageBackend};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InjectedFailure {
    /// Zero-based checkpoint index.
    pub checkpoint: u32,
    pub rank: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub model: ModelSpec,
    pub parallel: String,
    #[serde(default)]
    pub reshard_to: Option<String>,
    pub iterations: u64,
    pub checkpoint_interval: u64,
    #[serde(default)]
    pub t_iter_ms: f64,
    #[serde(default)]
    pub latency: StageLatency,
    #[serde(default)]
    pub failures: Vec<InjectedFailure>,
    /// Ranks that stop answering coordinator messages from the start.
    #[serde(default)]
    pub kill_ranks: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckpointRecord {
    pub checkpoint_id: String,
    pub step: u64,
    pub status: String,
    pub cache_hit: bool,
    pub blocking_ms: f64,
    pub end_to_end_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LoadRecord {
    pub checkpoint_id: String,
    pub target: String,
    pub verified: bool,
    pub end_to_end_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScenarioReport {
    pub checkpoints: Vec<CheckpointRecord>,
    pub load: Option<LoadRecord>,
    pub ettr: Option<Ettr>,
    pub save_comm: CommCounters,
}

impl Scenario {
    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let s: Self = serde_json::from_slice(bytes).map_err(|e| Error::Config(format!("scenario: {e}")))?;
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.checkpoint_interval == 0 || self.iterations < self.checkpoint_interval {
            return Err(Error::Config(
                "checkpoint_interval must be positive and no larger than iterations".into(),
            ));
        }
        if !self.t_iter_ms.is_finite() || self.t_iter_ms < 0.0 {
            return Err(Error::Config("t_iter_ms must be non-negative".into()));
        }
        self.latency.validate()
    }

    pub fn spec(&self) -> Result<ShardingSpec> {
        self.parallel.parse()
    }

    pub fn target(&self) -> Result<ShardingSpec> {
        self.reshard_to.as_deref().unwrap_or(&self.parallel).parse()
    }
}

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1e3
}

fn status(r: &Resolution) -> String {
    match r {
        Resolution::Complete => "complete".into(),
        Resolution::Incomplete(f) => format!(
            "incomplete: {}",
            f.iter()
                .map(|x| format!("rank {} at {}", x.rank, x.stage))
                .collect::<Vec<_>>()
                .join(", ")
        ),
        Resolution::Timeout { missing } => format!("timeout: ranks {missing:?}"),
    }
}

/// Runs the session, recording spans into `recorder`.
pub fn run_scenario(sc: &Scenario, run_id: &str, recorder: Arc<Recorder>) -> Result<ScenarioReport> {
    sc.validate()?;
    let spec = sc.spec()?;
    let target = sc.target()?;
    let comm = Arc::new(Comm::for_world(spec.world_size()));
    for r in &sc.kill_ranks {
        comm.kill(*r);
    }
    let engine = EngineConfig {
        latency: sc.latency.clone(),
        retry: RetryPolicy {
            max_retries: 1,
            base_backoff: Duration::from_millis(1),
        },
        ..EngineConfig::default()
    };
    let mut ck = Checkpointer::new(sc.model.clone(), spec)?
        .with_engine(engine.clone())?
        .with_recorder(recorder.clone())
        .with_comm(comm.clone());

    let mut records = Vec::new();
    let mut latest: Option<(String, Arc<dyn StorageBackend>)> = None;
    let mut save_times = Vec::new();
    let n_ckpt = sc.iterations / sc.checkpoint_interval;
    for k in 0..n_ckpt {
        let step = (k + 1) * sc.checkpoint_interval;
        let id = format!("{run_id}-step{step}");
        let faulty = Arc::new(FaultyBackend::new(MemoryBackend::new()));
        let failing: BTreeSet<u32> = sc
            .failures
            .iter()
            .filter(|f| u64::from(f.checkpoint) == k)
            .map(|f| f.rank)
            .collect();
        for r in &failing {
            faulty.fail_writes_permanently(&model_file_name(*r));
            faulty.fail_writes_permanently(&optim_file_name(*r));
        }
        let backend: Arc<dyn StorageBackend> = faulty;
        let state = ck.synthetic_state(step)?;
        let out = ck.save(&state, backend.clone(), &SaveOptions::new(&id))?.wait();
        records.push(CheckpointRecord {
            checkpoint_id: id.clone(),
            step,
            status: status(&out.resolution),
            cache_hit: out.cache_hit,
            blocking_ms: ms(out.report.blocking_time),
            end_to_end_ms: ms(out.report.end_to_end),
        });
        save_times.push(out.report.end_to_end.as_secs_f64());
        if out.resolution.is_complete() {
            latest = Some((id, backend));
        }
    }
    let save_comm = comm.counters();

    let mut load = None;
    let mut t_load = None;
    if let Some((id, backend)) = latest {
        let load_comm = Comm::for_world(target.world_size());
        let opts = LoadOptions {
            run_id: format!("{run_id}-load"),
            engine,
        };
        let loaded = load_checkpoint(backend, &id, &target, &opts, &load_comm, &recorder)?;
        let verified = loaded.verify().is_ok();
        t_load = Some(loaded.report.end_to_end.as_secs_f64());
        load = Some(LoadRecord {
            checkpoint_id: id,
            target: target.to_string(),
            verified,
            end_to_end_ms: ms(loaded.report.end_to_end),
        });
    }

    let ettr = match t_load {
        Some(t_load) if !save_times.is_empty() => Some(ettr(EttrInputs {
            t_save: save_times.iter().sum::<f64>() / save_times.len() as f64,
            t_load,
            n: sc.checkpoint_interval as f64,
            t_iter: sc.t_iter_ms / 1e3,
        })?),
        _ => None,
    };
    Ok(ScenarioReport {
        checkpoints: records,
        load,
        ettr,
        save_comm,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const SCRIPT: &str = r#"{
        "model": {"tensors": [
            {"fqn": "w", "global_shape": [4, 4], "dtype": "F32", "tp_shard_axis": 0},
            {"fqn": "b", "global_shape": [4], "dtype": "F32"}
        ], "seed": 5},
        "parallel": "tp=2,dp=2,pp=1",
        "reshard_to": "tp=1,dp=4,pp=1",
        "iterations": 300,
        "checkpoint_interval": 100,
        "t_iter_ms": 1.0,
        "failures": [{"checkpoint": 2, "rank": 1}]
    }"#;

    #[test]
    fn session_with_failure_falls_back_to_last_complete() {
        let sc = Scenario::from_json(SCRIPT.as_bytes()).unwrap();
        let rep = run_scenario(&sc, "t", Arc::new(Recorder::new())).unwrap();
        assert_eq!(rep.checkpoints.len(), 3);
        assert_eq!(rep.checkpoints[0].status, "complete");
        assert!(rep.checkpoints[2].status.starts_with("incomplete"));
        assert!(!rep.checkpoints[0].cache_hit && rep.checkpoints[1].cache_hit);
        let load = rep.load.unwrap();
        assert_eq!(load.checkpoint_id, "t-step200");
        assert!(load.verified);
        let e = rep.ettr.unwrap();
        assert!(e.ettr > 0.0 && e.ettr < 0.5);
        // one gather and one scatter over a 4-rank tree
        assert_eq!(rep.save_comm.planning_messages(), 6);
    }

    #[test]
    fn bad_scripts_are_config_errors() {
        assert_eq!(Scenario::from_json(b"{}").unwrap_err().category(), "config");
        let s = SCRIPT.replace("\"checkpoint_interval\": 100", "\"checkpoint_interval\": 0");
        assert_eq!(Scenario::from_json(s.as_bytes()).unwrap_err().category(), "config");
    }
}
