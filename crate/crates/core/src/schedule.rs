//! Tile schedules: which key blocks a query block must visit.
//!
//! A schedule is one [`TileRange`] of key-block indices per query block.
//! Its total length is the number of tiles a kernel computes, which is the
//! cost model every benchmark and acceptance check reports.

use alloc::vec::Vec;

use crate::tensor::BlockSpec;

/// Half-open interval `[start, stop)` of key-block indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct TileRange {
    pub start: usize,
    pub stop: usize,
}

impl TileRange {
    pub fn new(start: usize, stop: usize) -> Self {
        debug_assert!(start <= stop);
        Self { start, stop }
    }

    pub fn len(&self) -> usize {
        self.stop - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.stop == self.start
    }

    pub fn contains(&self, j: usize) -> bool {
        self.start <= j && j < self.stop
    }

    pub fn intersect(&self, other: TileRange) -> TileRange {
        let start = self.start.max(other.start);
        let stop = self.stop.min(other.stop).max(start);
        TileRange { start, stop }
    }
}

/// Total tiles of a schedule.
pub fn tile_count(ranges: &[TileRange]) -> u64 {
    ranges.iter().map(|r| r.len() as u64).sum()
}

fn block_bounds(len: usize, block: usize, i: usize) -> (usize, usize) {
    (i * block, ((i + 1) * block).min(len))
}

fn block_minmax<V: Copy + Ord>(xs: &[V], block: usize) -> Vec<(V, V)> {
    xs.chunks(block)
        .map(|c| {
            let mut lo = c[0];
            let mut hi = c[0];
            for &x in &c[1..] {
                lo = lo.min(x);
                hi = hi.max(x);
            }
            (lo, hi)
        })
        .collect()
}

/// Tiles of plain causal attention over `len` positions.
///
/// Query block `i` visits every key block whose first position does not
/// exceed the block's last query position.
pub fn dense_tile_count(len: usize, blocks: BlockSpec) -> u64 {
    (0..blocks.query_blocks(len))
        .map(|i| {
            let (_, end) = block_bounds(len, blocks.block_m, i);
            ((end - 1) / blocks.block_n + 1) as u64
        })
        .sum()
}

/// Per query block, the number of key blocks `j` with
/// `min(k_idx_j) <= max(q_idx_i)`; tiles `[0, j_stop)` are computed.
///
/// With monotone (compacted, padded) indices this is the first key block
/// that lies entirely in the future of the query block.
pub fn qk_tile_schedule(q_idx: &[i64], k_idx: &[i64], blocks: BlockSpec) -> Vec<usize> {
    let k_min: Vec<i64> = block_minmax(k_idx, blocks.block_n).iter().map(|p| p.0).collect();
    q_idx
        .chunks(blocks.block_m)
        .map(|qb| {
            let q_max = qb.iter().copied().max().unwrap_or(i64::MIN);
            k_min.iter().filter(|&&km| km <= q_max).count()
        })
        .collect()
}

/// Banded tile range of each query block over bucket-sorted operands.
///
/// * `start`: number of key blocks whose largest bucket is below the
///   smallest bucket of the query block.
/// * provisional stop: number of key blocks whose smallest bucket does not
///   exceed the largest bucket of the query block.
/// * `stop`: one past the last block in `[start, provisional stop)` with
///   `min(k_idx_j) <= max(q_idx_i)`, or `start` when no block qualifies.
pub fn hash_tile_range(
    q_hash: &[u32],
    q_idx: &[i64],
    k_hash: &[u32],
    k_idx: &[i64],
    blocks: BlockSpec,
) -> Vec<TileRange> {
    debug_assert_eq!(q_hash.len(), q_idx.len());
    debug_assert_eq!(k_hash.len(), k_idx.len());
    let k_hash_mm = block_minmax(k_hash, blocks.block_n);
    let k_idx_min: Vec<i64> = block_minmax(k_idx, blocks.block_n).iter().map(|p| p.0).collect();
    let q_hash_mm = block_minmax(q_hash, blocks.block_m);
    let q_idx_max: Vec<i64> = block_minmax(q_idx, blocks.block_m).iter().map(|p| p.1).collect();

    q_hash_mm
        .iter()
        .zip(&q_idx_max)
        .map(|(&(qh_min, qh_max), &qi_max)| {
            let start = k_hash_mm.iter().filter(|&&(_, kh_max)| kh_max < qh_min).count();
            let hash_stop = k_hash_mm.iter().filter(|&&(kh_min, _)| kh_min <= qh_max).count();
            let stop = (start..hash_stop)
                .rev()
                .find(|&j| k_idx_min[j] <= qi_max)
                .map_or(start, |j| j + 1);
            TileRange::new(start, stop.max(start))
        })
        .collect()
}

/// Key blocks reachable by a query block under a fixed-chunk window:
/// sorted query slot `p` sees sorted key slots in chunks `p / c` and
/// `p / c - 1`.
pub fn chunk_window_range(
    query_block: usize,
    len_q: usize,
    len_kv: usize,
    chunk: usize,
    blocks: BlockSpec,
) -> TileRange {
    let (p0, p1) = block_bounds(len_q, blocks.block_m, query_block);
    let lo_chunk = (p0 / chunk).saturating_sub(1);
    let hi_chunk = (p1 - 1) / chunk;
    let lo_slot = lo_chunk * chunk;
    let hi_slot = ((hi_chunk + 1) * chunk).min(len_kv);
    if lo_slot >= hi_slot {
        return TileRange::default();
    }
    TileRange::new(lo_slot / blocks.block_n, hi_slot.div_ceil(blocks.block_n))
}
