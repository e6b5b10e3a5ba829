//! Shard geometry: interval intersection, irregular flat-range decomposition
//! and strided region copies between row-major buffers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metadata::ShardMeta;

/// Intersection of two shards of the same tensor.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Overlap {
    /// The intersection in global coordinates.
    pub region: ShardMeta,
    /// Offsets of `region` inside the source (saved) shard.
    pub src_rel_offsets: Vec<u64>,
    /// Offsets of `region` inside the destination (wanted) shard.
    pub dst_rel_offsets: Vec<u64>,
}

pub fn volume(lengths: &[u64]) -> u64 {
    lengths.iter().product()
}

/// Canonical row-major strides, in elements.
pub fn row_major_strides(shape: &[u64]) -> Vec<u64> {
    let mut strides = vec![1u64; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

/// Row-major flat index of `coords` inside a tensor of `shape`.
pub fn flat_index(shape: &[u64], coords: &[u64]) -> u64 {
    row_major_strides(shape)
        .iter()
        .zip(coords)
        .map(|(s, c)| s * c)
        .sum()
}

/// Inverse of [`flat_index`].
pub fn unflatten(shape: &[u64], mut flat: u64) -> Vec<u64> {
    let mut coords = vec![0u64; shape.len()];
    for i in (0..shape.len()).rev() {
        coords[i] = flat % shape[i];
        flat /= shape[i];
    }
    coords
}

/// Per-axis interval intersection of a saved shard with a wanted shard.
///
/// Returns `Ok(None)` when the shards are disjoint along any axis.
pub fn overlap(saved: &ShardMeta, wanted: &ShardMeta) -> Result<Option<Overlap>> {
    if saved.fqn != wanted.fqn {
        return Err(Error::Precondition(format!(
            "overlap between different tensors `{}` and `{}`",
            saved.fqn, wanted.fqn
        )));
    }
    if saved.nd_offsets.len() != wanted.nd_offsets.len()
        || saved.nd_offsets.len() != saved.nd_lengths.len()
        || wanted.nd_offsets.len() != wanted.nd_lengths.len()
    {
        return Err(Error::Precondition(format!(
            "axis count mismatch for `{}`: {} vs {}",
            saved.fqn,
            saved.nd_offsets.len(),
            wanted.nd_offsets.len()
        )));
    }
    let axes = saved.nd_offsets.len();
    let mut offsets = Vec::with_capacity(axes);
    let mut lengths = Vec::with_capacity(axes);
    let mut src_rel = Vec::with_capacity(axes);
    let mut dst_rel = Vec::with_capacity(axes);
    for i in 0..axes {
        let start = saved.nd_offsets[i].max(wanted.nd_offsets[i]);
        let end = (saved.nd_offsets[i] + saved.nd_lengths[i])
            .min(wanted.nd_offsets[i] + wanted.nd_lengths[i]);
        if end <= start {
            return Ok(None);
        }
        offsets.push(start);
        lengths.push(end - start);
        src_rel.push(start - saved.nd_offsets[i]);
        dst_rel.push(start - wanted.nd_offsets[i]);
    }
    Ok(Some(Overlap {
        region: ShardMeta::new(saved.fqn.clone(), offsets, lengths),
        src_rel_offsets: src_rel,
        dst_rel_offsets: dst_rel,
    }))
}

/// Splits the row-major flat range `[flat_start, flat_end)` of a tensor into
/// regular blocks.
///
/// At each cursor the outermost axis `j` is chosen such that every coordinate
/// after `j` is zero and at least one full `j`-slab fits before `flat_end`;
/// the block then runs along axis `j` as far as both the range and the axis
/// extent allow.
pub fn decompose_flat_range(
    global_shape: &[u64],
    flat_start: u64,
    flat_end: u64,
    fqn: &str,
) -> Result<Vec<ShardMeta>> {
    let total = volume(global_shape);
    if global_shape.is_empty() || global_shape.contains(&0) {
        return Err(Error::Precondition(format!(
            "`{fqn}`: shape {global_shape:?} must have at least one positive axis"
        )));
    }
    if flat_end > total {
        return Err(Error::Range(format!(
            "`{fqn}`: flat end {flat_end} exceeds tensor volume {total}"
        )));
    }
    if flat_end <= flat_start {
        return Err(Error::Range(format!(
            "`{fqn}`: empty flat range [{flat_start}, {flat_end})"
        )));
    }
    let strides = row_major_strides(global_shape);
    let axes = global_shape.len();
    let mut blocks = Vec::new();
    let mut cursor = flat_start;
    while cursor < flat_end {
        let coords = unflatten(global_shape, cursor);
        let remaining = flat_end - cursor;
        let (axis, run) = (0..axes)
            .find_map(|j| {
                let aligned = coords[j + 1..].iter().all(|&c| c == 0);
                let run = (remaining / strides[j]).min(global_shape[j] - coords[j]);
                (aligned && run >= 1).then_some((j, run))
            })
            .expect("innermost axis always admits a block");
        let mut lengths = vec![1u64; axes];
        lengths[axis] = run;
        lengths[axis + 1..].copy_from_slice(&global_shape[axis + 1..]);
        cursor += run * strides[axis];
        blocks.push(ShardMeta::new(fqn.to_string(), coords, lengths));
    }
    Ok(blocks)
}

/// Flat element span `[first, last + 1)` occupied by a sub-region inside a
/// row-major shard buffer. Reading this contiguous span is enough to extract
/// the region.
pub fn region_flat_span(shard_lengths: &[u64], rel_offsets: &[u64], region_lengths: &[u64]) -> (u64, u64) {
    let first = flat_index(shard_lengths, rel_offsets);
    let last_coords: Vec<u64> = rel_offsets
        .iter()
        .zip(region_lengths)
        .map(|(o, l)| o + l - 1)
        .collect();
    (first, flat_index(shard_lengths, &last_coords) + 1)
}

/// Copies an n-d region between two row-major buffers.
///
/// `src` holds a block of extent `src_lengths` and `dst` a block of extent
/// `dst_lengths`; the region starts at `src_off` / `dst_off` respectively.
#[allow(clippy::too_many_arguments)]
pub fn copy_region(
    src: &[u8],
    src_lengths: &[u64],
    src_off: &[u64],
    dst: &mut [u8],
    dst_lengths: &[u64],
    dst_off: &[u64],
    region_lengths: &[u64],
    elem_size: usize,
) {
    let axes = region_lengths.len();
    if axes == 0 {
        dst[..elem_size].copy_from_slice(&src[..elem_size]);
        return;
    }
    let src_strides = row_major_strides(src_lengths);
    let dst_strides = row_major_strides(dst_lengths);
    let row = region_lengths[axes - 1] as usize * elem_size;
    let outer = &region_lengths[..axes - 1];
    let mut idx = vec![0u64; axes - 1];
    loop {
        let mut s = src_off[axes - 1];
        let mut d = dst_off[axes - 1];
        for a in 0..axes - 1 {
            s += (src_off[a] + idx[a]) * src_strides[a];
            d += (dst_off[a] + idx[a]) * dst_strides[a];
        }
        let s = s as usize * elem_size;
        let d = d as usize * elem_size;
        dst[d..d + row].copy_from_slice(&src[s..s + row]);

        // odometer increment over the outer axes
        let mut a = outer.len();
        loop {
            if a == 0 {
                return;
            }
            a -= 1;
            idx[a] += 1;
            if idx[a] < outer[a] {
                break;
            }
            idx[a] = 0;
        }
    }
}
