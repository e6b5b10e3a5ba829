//! Parallelism-agnostic checkpoint metadata.
//!
//! A checkpoint is one global metadata file plus headerless storage files.
//! Every saved tensor shard is indexed by a [`ShardEntry`] that ties its
//! position in the global tensor ([`ShardMeta`]) to runtime properties
//! ([`BasicMeta`]) and to its byte range in a storage file ([`ByteMeta`]).

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{overlap, row_major_strides, volume};

pub const METADATA_VERSION: i64 = 1;
pub const METADATA_FILE: &str = ".metadata";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Dtype {
    F32,
    F64,
    I32,
    I64,
    U8,
}

impl Dtype {
    pub const fn element_size(self) -> usize {
        match self {
            Dtype::F32 | Dtype::I32 => 4,
            Dtype::F64 | Dtype::I64 => 8,
            Dtype::U8 => 1,
        }
    }
}

impl fmt::Display for Dtype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// Position of a regular shard inside its global tensor.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ShardMeta {
    pub fqn: String,
    pub nd_offsets: Vec<u64>,
    pub nd_lengths: Vec<u64>,
}

impl ShardMeta {
    pub fn new(fqn: impl Into<String>, nd_offsets: Vec<u64>, nd_lengths: Vec<u64>) -> Self {
        Self {
            fqn: fqn.into(),
            nd_offsets,
            nd_lengths,
        }
    }

    pub fn full(fqn: impl Into<String>, global_shape: &[u64]) -> Self {
        Self::new(fqn, vec![0; global_shape.len()], global_shape.to_vec())
    }

    pub fn numel(&self) -> u64 {
        volume(&self.nd_lengths)
    }

    pub fn fits_in(&self, global_shape: &[u64]) -> bool {
        self.nd_offsets.len() == global_shape.len()
            && self.nd_lengths.len() == global_shape.len()
            && self
                .nd_offsets
                .iter()
                .zip(&self.nd_lengths)
                .zip(global_shape)
                .all(|((o, l), g)| *l > 0 && o + l <= *g)
    }
}

impl fmt::Display for ShardMeta {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}@{:?}+{:?}", self.fqn, self.nd_offsets, self.nd_lengths)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BasicMeta {
    pub fqn: String,
    pub global_shape: Vec<u64>,
    pub dtype: Dtype,
    pub stride: Vec<u64>,
    pub device_tag: String,
}

impl BasicMeta {
    pub fn new(fqn: impl Into<String>, global_shape: Vec<u64>, dtype: Dtype, device_tag: impl Into<String>) -> Self {
        let stride = row_major_strides(&global_shape);
        Self {
            fqn: fqn.into(),
            global_shape,
            dtype,
            stride,
            device_tag: device_tag.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ByteMeta {
    pub file_name: String,
    pub byte_offset: u64,
    pub byte_length: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ShardEntry {
    pub shard: ShardMeta,
    pub basic: BasicMeta,
    pub byte: ByteMeta,
    pub writer_rank: u32,
}

/// Contents of the `.metadata` file.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct GlobalMetadata {
    pub version: i64,
    pub tensor_map: BTreeMap<String, Vec<ShardEntry>>,
    pub loader_map: BTreeMap<u32, ByteMeta>,
    pub replicated_loader_file: Option<String>,
    pub extra_state_files: BTreeMap<u32, String>,
}

impl GlobalMetadata {
    pub fn new() -> Self {
        Self {
            version: METADATA_VERSION,
            ..Default::default()
        }
    }

    /// Inserts an entry, keeping each fqn's list sorted by shard position.
    pub fn insert(&mut self, entry: ShardEntry) {
        let list = self.tensor_map.entry(entry.shard.fqn.clone()).or_default();
        let pos = list
            .binary_search_by(|e| e.shard.cmp(&entry.shard))
            .unwrap_or_else(|p| p);
        list.insert(pos, entry);
    }

    pub fn entries(&self) -> impl Iterator<Item = &ShardEntry> {
        self.tensor_map.values().flatten()
    }

    /// Names of every storage file referenced by this metadata.
    pub fn referenced_files(&self) -> Vec<String> {
        let mut files: Vec<String> = self
            .entries()
            .map(|e| e.byte.file_name.clone())
            .chain(self.loader_map.values().map(|b| b.file_name.clone()))
            .chain(self.replicated_loader_file.iter().cloned())
            .chain(self.extra_state_files.values().cloned())
            .collect();
        files.sort();
        files.dedup();
        files
    }
}

/// Canonical encoding: compact JSON with lexicographically sorted keys.
pub fn encode_metadata(meta: &GlobalMetadata) -> Vec<u8> {
    // serde_json::Value keeps object keys in a BTreeMap, which yields the
    // sorted key order regardless of struct field order.
    let value = serde_json::to_value(meta).expect("metadata is always representable as JSON");
    serde_json::to_vec(&value).expect("JSON value serialization cannot fail")
}

pub fn decode_metadata(bytes: &[u8]) -> Result<GlobalMetadata> {
    let value: serde_json::Value = serde_json::from_slice(bytes).map_err(|e| parse_error(bytes, &e))?;
    let version = value
        .get("version")
        .and_then(|v| v.as_i64())
        .ok_or_else(|| Error::Parse {
            offset: 0,
            message: "missing integer `version` field".into(),
        })?;
    if version != METADATA_VERSION {
        return Err(Error::Version {
            found: version,
            supported: METADATA_VERSION,
        });
    }
    serde_json::from_value(value).map_err(|e| Error::Parse {
        offset: 0,
        message: e.to_string(),
    })
}

fn parse_error(bytes: &[u8], err: &serde_json::Error) -> Error {
    // serde_json reports 1-based line/column; convert back to a byte offset.
    let mut offset = 0usize;
    for (i, line) in bytes.split(|b| *b == b'\n').enumerate() {
        if i + 1 == err.line() {
            offset += err.column().saturating_sub(1).min(line.len());
            break;
        }
        offset += line.len() + 1;
    }
    Error::Parse {
        offset: offset.min(bytes.len()),
        message: err.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CoverageViolation {
    /// Sum of shard volumes differs from the global volume.
    Gap { fqn: String, covered: u64, expected: u64 },
    /// Two shards share `region`.
    DoubleCoverage { fqn: String, region: ShardMeta },
    /// A shard lies (partly) outside its tensor.
    OutOfBounds { fqn: String, shard: ShardMeta },
    /// Shards of one tensor disagree on shape, dtype or stride.
    Inconsistent { fqn: String, reason: String },
}

impl fmt::Display for CoverageViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CoverageViolation::Gap { fqn, covered, expected } => {
                write!(f, "gap: `{fqn}` covers {covered} of {expected} elements")
            }
            CoverageViolation::DoubleCoverage { fqn, region } => {
                write!(
                    f,
                    "double coverage: `{fqn}` region offsets {:?} lengths {:?}",
                    region.nd_offsets, region.nd_lengths
                )
            }
            CoverageViolation::OutOfBounds { fqn, shard } => write!(f, "out of bounds: `{fqn}` shard {shard}"),
            CoverageViolation::Inconsistent { fqn, reason } => write!(f, "inconsistent: `{fqn}`: {reason}"),
        }
    }
}

/// Checks that every tensor's shards tile its global shape exactly once.
pub fn validate_coverage(meta: &GlobalMetadata) -> Vec<CoverageViolation> {
    let mut violations = Vec::new();
    for (fqn, entries) in &meta.tensor_map {
        let Some(first) = entries.first() else { continue };
        let shape = &first.basic.global_shape;
        if let Some(bad) = entries.iter().find(|e| {
            e.basic.global_shape != *shape || e.basic.dtype != first.basic.dtype || e.basic.stride != first.basic.stride
        }) {
            violations.push(CoverageViolation::Inconsistent {
                fqn: fqn.clone(),
                reason: format!("shard {} disagrees with {}", bad.shard, first.shard),
            });
            continue;
        }
        let mut in_bounds = true;
        for e in entries {
            if e.shard.fqn != *fqn || !e.shard.fits_in(shape) {
                violations.push(CoverageViolation::OutOfBounds {
                    fqn: fqn.clone(),
                    shard: e.shard.clone(),
                });
                in_bounds = false;
            }
        }
        if !in_bounds {
            continue;
        }
        let covered: u64 = entries.iter().map(|e| e.shard.numel()).sum();
        let expected = volume(shape);
        if covered != expected {
            violations.push(CoverageViolation::Gap {
                fqn: fqn.clone(),
                covered,
                expected,
            });
        }
        for (i, a) in entries.iter().enumerate() {
            for b in &entries[i + 1..] {
                if let Ok(Some(ov)) = overlap(&a.shard, &b.shard) {
                    violations.push(CoverageViolation::DoubleCoverage {
                        fqn: fqn.clone(),
                        region: ov.region,
                    });
                }
            }
        }
    }
    violations
}
