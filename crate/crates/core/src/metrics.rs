//! Span recording, heatmap export and ETTR.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Phases the engine and API layer emit.
pub const KNOWN_PHASES: &[&str] = &[
    "plan",
    "save",
    "snapshot",
    "serialize",
    "dump",
    "upload",
    "loader_upload",
    "concat",
    "load",
    "read",
    "deserialize",
    "copy",
    "exchange",
    "loader_reshard",
];

/// Phases that enclose other phases; left out of per-rank totals.
pub const CONTAINER_PHASES: &[&str] = &["save", "load"];

/// One timed operation. Times are microseconds since the recorder's epoch.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub rank: u32,
    pub phase: String,
    pub start_us: u64,
    pub end_us: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub io_bytes: Option<u64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub attributes: BTreeMap<String, String>,
}

impl Span {
    pub fn duration(&self) -> Duration {
        Duration::from_micros(self.end_us - self.start_us)
    }

    pub fn contains(&self, other: &Span) -> bool {
        self.start_us <= other.start_us && other.end_us <= self.end_us
    }
}

/// Thread-safe span sink shared by all rank pipelines of a run.
#[derive(Debug)]
pub struct Recorder {
    epoch: Instant,
    spans: Mutex<Vec<Span>>,
}

impl Default for Recorder {
    fn default() -> Self {
        Self::new()
    }
}

impl Recorder {
    pub fn new() -> Self {
        Self::with_epoch(Instant::now())
    }

    pub fn with_epoch(epoch: Instant) -> Self {
        Self {
            epoch,
            spans: Mutex::new(Vec::new()),
        }
    }

    pub fn epoch(&self) -> Instant {
        self.epoch
    }

    pub fn micros(&self, t: Instant) -> u64 {
        t.saturating_duration_since(self.epoch).as_micros() as u64
    }

    pub fn now_us(&self) -> u64 {
        self.micros(Instant::now())
    }

    /// Starts a span that is recorded when the guard drops.
    pub fn span(self: &Arc<Self>, rank: u32, phase: &str) -> SpanGuard {
        SpanGuard {
            recorder: self.clone(),
            span: Some(Span {
                rank,
                phase: phase.to_string(),
                start_us: self.now_us(),
                end_us: 0,
                io_bytes: None,
                attributes: BTreeMap::new(),
            }),
        }
    }

    pub fn record(&self, span: Span) {
        self.spans.lock().unwrap().push(span);
    }

    pub fn spans(&self) -> Vec<Span> {
        let mut out = self.spans.lock().unwrap().clone();
        out.sort_by(|a, b| (a.start_us, a.rank, &a.phase).cmp(&(b.start_us, b.rank, &b.phase)));
        out
    }

    pub fn spans_where(&self, key: &str, value: &str) -> Vec<Span> {
        self.spans()
            .into_iter()
            .filter(|s| s.attributes.get(key).map(String::as_str) == Some(value))
            .collect()
    }

    /// Appends all spans as JSON lines to `path`.
    pub fn persist(&self, path: &Path) -> Result<()> {
        use std::io::Write;
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
        for s in self.spans() {
            serde_json::to_writer(&mut f, &s).map_err(|e| Error::Codec(e.to_string()))?;
            f.write_all(b"\n")?;
        }
        Ok(())
    }
}

pub fn load_spans(path: &Path) -> Result<Vec<Span>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::Codec(format!("{}:{}: {e}", path.display(), i + 1))))
        .collect()
}

/// RAII span; records on drop.
#[derive(Debug)]
pub struct SpanGuard {
    recorder: Arc<Recorder>,
    span: Option<Span>,
}

impl SpanGuard {
    pub fn bytes(mut self, n: u64) -> Self {
        self.set_bytes(n);
        self
    }

    pub fn set_bytes(&mut self, n: u64) {
        if let Some(s) = &mut self.span {
            s.io_bytes = Some(n);
        }
    }

    pub fn attr(mut self, key: &str, value: impl ToString) -> Self {
        if let Some(s) = &mut self.span {
            s.attributes.insert(key.to_string(), value.to_string());
        }
        self
    }

    pub fn finish(mut self) -> Span {
        self.close().expect("span not yet closed")
    }

    fn close(&mut self) -> Option<Span> {
        let mut s = self.span.take()?;
        s.end_us = self.recorder.now_us().max(s.start_us);
        self.recorder.record(s.clone());
        Some(s)
    }
}

impl Drop for SpanGuard {
    fn drop(&mut self) {
        self.close();
    }
}

/// One heatmap cell: total time and bytes of `phase` on `rank`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HeatmapRow {
    pub rank: u32,
    pub phase: String,
    pub duration_ms: f64,
    pub io_bytes: u64,
    /// Summed time of the rank's non-container phases.
    pub rank_total_ms: f64,
}

/// Aggregates spans into rows sorted by (rank, phase). `phase` restricts the
/// table to one known phase.
pub fn export_heatmap(spans: &[Span], phase: Option<&str>) -> Result<Vec<HeatmapRow>> {
    if let Some(p) = phase {
        if !KNOWN_PHASES.contains(&p) {
            return Err(Error::Config(format!(
                "unknown phase `{p}`; known phases: {}",
                KNOWN_PHASES.join(", ")
            )));
        }
    }
    let mut cells: BTreeMap<(u32, &str), (u64, u64)> = BTreeMap::new();
    for s in spans.iter().filter(|s| phase.is_none_or(|p| s.phase == p)) {
        let c = cells.entry((s.rank, &s.phase)).or_default();
        c.0 += s.end_us - s.start_us;
        c.1 += s.io_bytes.unwrap_or(0);
    }
    let mut totals: BTreeMap<u32, u64> = BTreeMap::new();
    for ((rank, phase), (us, _)) in &cells {
        let t = totals.entry(*rank).or_default();
        if !CONTAINER_PHASES.contains(phase) {
            *t += us;
        }
    }
    Ok(cells
        .into_iter()
        .map(|((rank, phase), (us, bytes))| HeatmapRow {
            rank,
            phase: phase.to_string(),
            duration_ms: us as f64 / 1e3,
            io_bytes: bytes,
            rank_total_ms: totals[&rank] as f64 / 1e3,
        })
        .collect())
}

pub fn heatmap_csv(rows: &[HeatmapRow]) -> String {
    let mut out = String::from("rank,phase,duration_ms,io_bytes,rank_total_ms\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{:.3},{},{:.3}",
            r.rank, r.phase, r.duration_ms, r.io_bytes, r.rank_total_ms
        );
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EttrInputs {
    pub t_save: f64,
    pub t_load: f64,
    /// Checkpoint interval in iterations.
    pub n: f64,
    pub t_iter: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Ettr {
    pub t_wasted: f64,
    pub ettr: f64,
}

/// Expected wasted time per failure and the resulting effective training
/// time ratio, assuming failures land uniformly within an interval.
pub fn ettr(inputs: EttrInputs) -> Result<Ettr> {
    let EttrInputs { t_save, t_load, n, t_iter } = inputs;
    if [t_save, t_load, n, t_iter].iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::Domain(format!("ETTR inputs must be finite and non-negative: {inputs:?}")));
    }
    let interval = n * t_iter;
    let denom = t_save + t_load + interval;
    if denom <= 0.0 {
        return Err(Error::Domain("ETTR is undefined when all durations are zero".into()));
    }
    let t_wasted = t_save + t_load + interval / 2.0;
    Ok(Ettr {
        t_wasted,
        ettr: 1.0 - t_wasted / denom,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn span(rank: u32, phase: &str, start: u64, end: u64) -> Span {
        Span {
            rank,
            phase: phase.into(),
            start_us: start,
            end_us: end,
            io_bytes: Some(10),
            attributes: BTreeMap::new(),
        }
    }

    #[test]
    fn ettr_fixed_point() {
        let r = ettr(EttrInputs { t_save: 10.0, t_load: 20.0, n: 1.0, t_iter: 100.0 }).unwrap();
        assert_eq!(r.t_wasted, 80.0);
        assert!((r.ettr - (1.0 - 80.0 / 130.0)).abs() < 1e-12);
    }

    #[test]
    fn ettr_without_checkpoint_costs_is_half() {
        for x in [0.5, 1.0, 1e3, 1e9] {
            let r = ettr(EttrInputs { t_save: 0.0, t_load: 0.0, n: 1.0, t_iter: x }).unwrap();
            assert_eq!(r.ettr, 0.5);
        }
    }

    #[test]
    fn ettr_rises_towards_half() {
        let mut prev = 0.0;
        for k in 2..=6 {
            let n = 10f64.powi(k);
            let e = ettr(EttrInputs { t_save: 10.0, t_load: 20.0, n, t_iter: 1.0 }).unwrap().ettr;
            assert!(e > prev && e < 0.5);
            prev = e;
        }
    }

    #[test]
    fn ettr_zero_is_domain_error() {
        let e = ettr(EttrInputs { t_save: 0.0, t_load: 0.0, n: 1.0, t_iter: 0.0 }).unwrap_err();
        assert_eq!(e.category(), "domain");
    }

    #[test]
    fn heatmap_groups_and_sorts() {
        let spans = vec![
            span(1, "upload", 0, 2000),
            span(0, "upload", 0, 1000),
            span(0, "snapshot", 0, 500),
            span(0, "upload", 3000, 4000),
            span(0, "save", 0, 4000),
        ];
        let rows = export_heatmap(&spans, None).unwrap();
        let keys: Vec<(u32, &str)> = rows.iter().map(|r| (r.rank, r.phase.as_str())).collect();
        assert_eq!(keys, vec![(0, "save"), (0, "snapshot"), (0, "upload"), (1, "upload")]);
        assert_eq!(rows[2].duration_ms, 2.0);
        assert_eq!(rows[2].io_bytes, 20);
        assert_eq!(rows[0].rank_total_ms, 2.5);

        let only = export_heatmap(&spans, Some("upload")).unwrap();
        assert!(only.iter().all(|r| r.phase == "upload"));
    }

    #[test]
    fn heatmap_edge_cases() {
        assert_eq!(heatmap_csv(&export_heatmap(&[], None).unwrap()), "rank,phase,duration_ms,io_bytes,rank_total_ms\n");
        let err = export_heatmap(&[], Some("teleport")).unwrap_err();
        assert!(err.to_string().contains("upload"));
    }

    #[test]
    fn guards_record_on_drop_and_persist() {
        let rec = Arc::new(Recorder::new());
        {
            let _g = rec.span(3, "dump").bytes(7).attr("checkpoint_id", "c1");
        }
        let s = rec.span(3, "copy").finish();
        assert!(s.end_us >= s.start_us);
        assert_eq!(rec.spans().len(), 2);
        assert_eq!(rec.spans_where("checkpoint_id", "c1").len(), 1);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.jsonl");
        rec.persist(&path).unwrap();
        assert_eq!(load_spans(&path).unwrap(), rec.spans());
    }
}
