use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use ckpt_core::barrier::{read_failure_log, COMPLETE_MARKER};
use ckpt_core::checkpoint::{load_checkpoint, open_checkpoint, Checkpointer, LoadOptions, SaveOptions};
use ckpt_core::comm::Comm;
use ckpt_core::engine::{EngineConfig, PipelineReport, StageLatency};
use ckpt_core::metadata::{decode_metadata, validate_coverage, METADATA_FILE};
use ckpt_core::metrics::{export_heatmap, heatmap_csv, load_spans, Recorder};
use ckpt_core::planner::plan_load;
use ckpt_core::scenario::{run_scenario, Scenario};
use ckpt_core::sharding::{all_layouts, ModelSpec, ShardingSpec};
use ckpt_core::storage::open_backend;
use ckpt_core::{Error, Result};

#[derive(Parser)]
#[command(name = "ckpt", version, about = "Save, load and reshard simulated distributed checkpoints")]
struct Cli {
    /// Where run spans are stored as JSON lines.
    #[arg(long, global = true, env = "CKPT_METRICS_DIR", default_value = ".ckpt-metrics")]
    metrics_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Save a synthetic training state.
    Save {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        parallel: ShardingSpec,
        #[arg(long)]
        out: String,
        /// JSON map of stage name to {fixed_ms, per_mib_ms}.
        #[arg(long)]
        latency: Option<PathBuf>,
        #[arg(long)]
        no_cache: bool,
        #[arg(long)]
        id: Option<String>,
        #[arg(long, default_value_t = 0)]
        step: u64,
    },
    /// Load (and reshard) a checkpoint.
    Load {
        #[arg(long = "in")]
        input: String,
        #[arg(long)]
        parallel: ShardingSpec,
        /// Compare every loaded element with the model's ground truth.
        #[arg(long)]
        verify: bool,
        #[arg(long)]
        run_id: Option<String>,
    },
    /// Show a checkpoint's metadata and coverage.
    Inspect {
        #[arg(long = "in")]
        input: String,
        /// Also print load plans for `--parallel`.
        #[arg(long, requires = "parallel")]
        plans: bool,
        #[arg(long)]
        parallel: Option<ShardingSpec>,
    },
    /// Run a scripted multi-checkpoint session.
    Simulate {
        #[arg(long)]
        script: PathBuf,
        #[arg(long)]
        run_id: Option<String>,
    },
    /// Export recorded metrics.
    Metrics {
        #[command(subcommand)]
        command: MetricsCommand,
    },
}

#[derive(Subcommand)]
enum MetricsCommand {
    Export {
        #[arg(long)]
        run: String,
        #[arg(long, value_enum, default_value_t = Format::Csv)]
        format: Format,
        /// Keep only rows of this phase.
        #[arg(long)]
        phase: Option<String>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
}

fn fresh_id(prefix: &str) -> String {
    let ms = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis()).unwrap_or(0);
    format!("{prefix}-{ms}")
}

fn run_file(dir: &Path, run: &str) -> PathBuf {
    dir.join(format!("{run}.jsonl"))
}

fn summary(report: &PipelineReport) -> Value {
    let mut phases = serde_json::Map::new();
    for p in ckpt_core::metrics::KNOWN_PHASES {
        let total = report.phase_total(p);
        if !total.is_zero() {
            phases.insert(p.to_string(), json!(total.as_secs_f64() * 1e3));
        }
    }
    json!({
        "blocking_ms": report.blocking_time.as_secs_f64() * 1e3,
        "end_to_end_ms": report.end_to_end.as_secs_f64() * 1e3,
        "span_count": report.spans.len(),
        "phase_totals_ms": phases,
    })
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn run(cli: Cli) -> Result<Value> {
    match cli.command {
        Command::Save {
            model,
            parallel,
            out,
            latency,
            no_cache,
            id,
            step,
        } => {
            let model = ModelSpec::from_json(&read(&model)?)?;
            let mut engine = EngineConfig::default();
            if let Some(p) = latency {
                engine.latency = StageLatency::from_json(&read(&p)?)?;
            }
            let id = id.unwrap_or_else(|| fresh_id("ckpt"));
            let recorder = Arc::new(Recorder::new());
            let backend = open_backend(&out)?;
            let mut ck = Checkpointer::new(model, parallel)?
                .with_engine(engine)?
                .with_recorder(recorder.clone());
            let state = ck.synthetic_state(step)?;
            let mut opts = SaveOptions::new(&id);
            opts.use_cache = !no_cache;
            let outcome = ck.save(&state, backend, &opts)?.wait();
            recorder.persist(&run_file(&cli.metrics_dir, &id))?;
            if !outcome.resolution.is_complete() {
                return Err(Error::Integrity(format!(
                    "checkpoint `{id}` did not complete: {:?}",
                    outcome.resolution
                )));
            }
            Ok(json!({
                "checkpoint_id": id,
                "run_id": id,
                "location": out,
                "parallel": parallel.to_string(),
                "status": "complete",
                "cache_hit": outcome.cache_hit,
                "report": summary(&outcome.report),
            }))
        }
        Command::Load {
            input,
            parallel,
            verify,
            run_id,
        } => {
            let run_id = run_id.unwrap_or_else(|| fresh_id("load"));
            let recorder = Arc::new(Recorder::new());
            let backend = open_backend(&input)?;
            let comm = Comm::for_world(parallel.world_size());
            let opts = LoadOptions {
                run_id: run_id.clone(),
                ..LoadOptions::default()
            };
            let loaded = load_checkpoint(backend, &input, &parallel, &opts, &comm, &recorder)?;
            recorder.persist(&run_file(&cli.metrics_dir, &run_id))?;
            if verify {
                loaded.verify()?;
            }
            let bytes: u64 = loaded.ranks.iter().flat_map(|r| r.tensors.values()).map(|b| b.len() as u64).sum();
            Ok(json!({
                "run_id": run_id,
                "location": input,
                "parallel": parallel.to_string(),
                "verified": verify,
                "tensor_bytes": bytes,
                "loader_ranks": loaded.ranks.iter().filter(|r| r.loader.is_some()).count(),
                "report": summary(&loaded.report),
            }))
        }
        Command::Inspect { input, plans, parallel } => {
            let backend = open_backend(&input)?;
            let complete = backend.exists(COMPLETE_MARKER);
            let meta = decode_metadata(&backend.read_file(METADATA_FILE).map_err(|e| {
                Error::Integrity(format!("`{input}` has no readable {METADATA_FILE}: {e}"))
            })?)?;
            let coverage: Vec<String> = validate_coverage(&meta).iter().map(ToString::to_string).collect();
            let failures: Vec<Value> = read_failure_log(backend.as_ref())
                .into_iter()
                .map(|f| json!({"rank": f.rank, "stage": f.stage, "reason": f.reason}))
                .collect();
            let mut out = json!({
                "location": input,
                "complete": complete,
                "coverage_ok": coverage.is_empty(),
                "coverage_violations": coverage,
                "failures": failures,
                "files": meta.referenced_files(),
                "metadata": serde_json::to_value(&meta).expect("metadata serializes"),
            });
            if plans {
                let target = parallel.expect("clap enforces --parallel");
                let (model, _) = open_checkpoint(backend.as_ref(), &input)?;
                let layouts = all_layouts(&model, &target)?;
                let plans = plan_load(&meta, &layouts, &target)?;
                out["plans"] = serde_json::to_value(&plans).expect("plans serialize");
            }
            Ok(out)
        }
        Command::Simulate { script, run_id } => {
            let sc = Scenario::from_json(&read(&script)?)?;
            let run_id = run_id.unwrap_or_else(|| fresh_id("sim"));
            let recorder = Arc::new(Recorder::new());
            let report = run_scenario(&sc, &run_id, recorder.clone())?;
            recorder.persist(&run_file(&cli.metrics_dir, &run_id))?;
            let mut out = serde_json::to_value(&report).expect("report serializes");
            out["run_id"] = json!(run_id);
            Ok(out)
        }
        Command::Metrics {
            command: MetricsCommand::Export { run, format, phase },
        } => {
            let path = run_file(&cli.metrics_dir, &run);
            if !path.exists() {
                return Err(Error::Config(format!("no metrics recorded for run `{run}` in {}", cli.metrics_dir.display())));
            }
            let rows = export_heatmap(&load_spans(&path)?, phase.as_deref())?;
            match format {
                Format::Csv => {
                    emit(&heatmap_csv(&rows));
                    Ok(Value::Null)
                }
                Format::Json => Ok(serde_json::to_value(&rows).expect("rows serialize")),
            }
        }
    }
}

/// Writes to stdout, tolerating a closed pipe.
fn emit(text: &str) {
    use std::io::Write;
    let _ = std::io::stdout().lock().write_all(text.as_bytes());
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(Value::Null) => ExitCode::SUCCESS,
        Ok(v) => {
            emit(&format!("{}\n", serde_json::to_string_pretty(&v).expect("json output")));
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", json!({"error": {"category": e.category(), "message": e.to_string()}}));
            ExitCode::FAILURE
        }
    }
}
