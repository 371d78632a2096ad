//! The tiled attention engine shared by the dense, QK-sparse, hash-sparse
//! and chunked kernels.
//!
//! A kernel is fully described by an [`Indexing`]: per-slot original
//! positions for queries and keys, optional bucket ids, the self-exclusion
//! flag and an optional chunk window. From it each `(batch, head)` slice gets
//! a tile schedule and a per-entry mask. Forward passes stream the scheduled
//! tiles of one query block through a [`SoftmaxState`]; backward passes
//! recompute the probabilities tile by tile from the stored statistics.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{bail, Result};
use crate::par;
use crate::schedule::{chunk_window_range, hash_tile_range, qk_tile_schedule, TileRange};
use crate::softmax::SoftmaxState;
use crate::tensor::{AttentionBatch, BlockSpec, Grid3, Layout, Tensor4};
use crate::Element;

/// Forward results: output rows plus the softmax statistics the backward
/// pass recomputes probabilities from.
#[derive(Debug, Clone, PartialEq)]
pub struct FlashOutputs<T> {
    /// Output, head-major, same shape as the queries.
    pub o: Tensor4<T>,
    /// Per-query running maximum `(B, H, T_Q)`; `-inf` for stranded queries.
    pub m: Grid3<T>,
    /// Per-query softmax denominator `(B, H, T_Q)`; `0` for stranded queries.
    pub l: Grid3<T>,
    /// Tiles computed over all `(batch, head)` slices.
    pub tiles_computed: u64,
}

/// Gradients of `<O, dO>` with respect to the three operands.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub dq: Tensor4<T>,
    pub dk: Tensor4<T>,
    pub dv: Tensor4<T>,
}

impl<T: Element> Gradients<T> {
    pub fn all_finite(&self) -> bool {
        self.dq.all_finite() && self.dk.all_finite() && self.dv.all_finite()
    }
}

/// Index metadata that determines both the mask and the tile schedule.
///
/// All grids are head-major. Query grids have length `T_Q`, key grids
/// `T_KV`.
#[derive(Debug, Clone, Copy)]
pub struct Indexing<'a> {
    pub q_idx: &'a Grid3<i64>,
    pub k_idx: &'a Grid3<i64>,
    /// `(q_hash, k_hash)`: restricts attention to equal buckets and switches
    /// the schedule to the banded hash range.
    pub buckets: Option<(&'a Grid3<u32>, &'a Grid3<u32>)>,
    /// Use `q_idx > k_idx` instead of `q_idx >= k_idx`.
    pub exclude_self: bool,
    /// Fixed chunk window over sorted slots.
    pub chunk: Option<usize>,
}

impl<'a> Indexing<'a> {
    pub fn causal(q_idx: &'a Grid3<i64>, k_idx: &'a Grid3<i64>) -> Self {
        Self {
            q_idx,
            k_idx,
            buckets: None,
            exclude_self: false,
            chunk: None,
        }
    }

    fn check<T: Element>(&self, batch: &AttentionBatch<T>) -> Result<()> {
        let qs = batch.q.shape();
        let ks = batch.k.shape();
        let grids_ok = |g_b: usize, g_h: usize, g_t: usize, t: usize| g_b == qs.batch && g_h == qs.heads && g_t == t;
        let (q, k) = (self.q_idx, self.k_idx);
        if !grids_ok(q.batch(), q.heads(), q.len(), qs.len) || !grids_ok(k.batch(), k.heads(), k.len(), ks.len) {
            bail!(Shape, "index grids do not match operands {qs:?} / {ks:?}");
        }
        if q.layout() != Layout::HeadMajor || k.layout() != Layout::HeadMajor {
            bail!(Shape, "index grids must be head-major");
        }
        if let Some((qh, kh)) = self.buckets {
            if !qh.same_grid(q) || !kh.same_grid(k) {
                bail!(Shape, "bucket grids do not match index grids");
            }
            if qh.layout() != Layout::HeadMajor || kh.layout() != Layout::HeadMajor {
                bail!(Shape, "bucket grids must be head-major");
            }
        }
        if self.chunk == Some(0) {
            bail!(Parameter, "chunk length must be >= 1");
        }
        Ok(())
    }

    /// Mask and schedule view of one `(b, h)` slice.
    pub fn slice(&self, b: usize, h: usize) -> SliceMask<'a> {
        SliceMask {
            q_idx: self.q_idx.slice(b, h),
            k_idx: self.k_idx.slice(b, h),
            buckets: self.buckets.map(|(qh, kh)| (qh.slice(b, h), kh.slice(b, h))),
            exclude_self: self.exclude_self,
            chunk: self.chunk,
        }
    }

    /// Schedules of every slice, in `(b, h)` order.
    pub fn schedules(&self, blocks: BlockSpec) -> Vec<Vec<TileRange>> {
        let (nb, nh) = (self.q_idx.batch(), self.q_idx.heads());
        (0..nb * nh)
            .map(|s| self.slice(s / nh, s % nh).schedule(blocks))
            .collect()
    }
}

/// Mask and schedule of a single `(batch, head)` slice.
#[derive(Debug, Clone, Copy)]
pub struct SliceMask<'a> {
    pub q_idx: &'a [i64],
    pub k_idx: &'a [i64],
    pub buckets: Option<(&'a [u32], &'a [u32])>,
    pub exclude_self: bool,
    pub chunk: Option<usize>,
}

impl SliceMask<'_> {
    /// Whether query slot `i` may attend to key slot `j`.
    #[inline]
    pub fn allows(&self, i: usize, j: usize) -> bool {
        let (qi, kj) = (self.q_idx[i], self.k_idx[j]);
        let causal = if self.exclude_self { qi > kj } else { qi >= kj };
        causal
            && self.buckets.is_none_or(|(qh, kh)| qh[i] == kh[j])
            && self.chunk.is_none_or(|c| {
                let (qc, kc) = (i / c, j / c);
                kc <= qc && kc + 1 >= qc
            })
    }

    pub fn schedule(&self, blocks: BlockSpec) -> Vec<TileRange> {
        let mut ranges: Vec<TileRange> = match self.buckets {
            None => qk_tile_schedule(self.q_idx, self.k_idx, blocks)
                .into_iter()
                .map(|stop| TileRange::new(0, stop))
                .collect(),
            Some((qh, kh)) => hash_tile_range(qh, self.q_idx, kh, self.k_idx, blocks),
        };
        if let Some(c) = self.chunk {
            let (tq, tkv) = (self.q_idx.len(), self.k_idx.len());
            for (i, r) in ranges.iter_mut().enumerate() {
                *r = r.intersect(chunk_window_range(i, tq, tkv, c, blocks));
            }
        }
        ranges
    }
}

#[inline]
pub(crate) fn dot<T: Element>(a: &[T], b: &[T]) -> T {
    let n = a.len();
    let mut acc = [T::zero(); 8];
    let chunks = n / 8;
    for c in 0..chunks {
        let (x, y) = (&a[c * 8..c * 8 + 8], &b[c * 8..c * 8 + 8]);
        for l in 0..8 {
            acc[l] = acc[l] + x[l] * y[l];
        }
    }
    let mut tail = T::zero();
    for i in chunks * 8..n {
        tail = tail + a[i] * b[i];
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

#[inline]
fn axpy<T: Element>(y: &mut [T], alpha: T, x: &[T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = *yi + alpha * xi;
    }
}

fn bounds(len: usize, block: usize, i: usize) -> (usize, usize) {
    (i * block, ((i + 1) * block).min(len))
}

/// Fills `logits` (`rows x cols`) for one tile, writing `-inf` where masked.
#[allow(clippy::too_many_arguments)]
fn fill_logits<T: Element>(
    logits: &mut [T],
    q: &[T],
    k: &[T],
    dim: usize,
    mask: &SliceMask<'_>,
    (r0, r1): (usize, usize),
    (c0, c1): (usize, usize),
    tau: T,
) -> Result<()> {
    let cols = c1 - c0;
    for (r, row) in (r0..r1).zip(logits.chunks_mut(cols)) {
        let q_row = &q[r * dim..(r + 1) * dim];
        for (c, out) in (c0..c1).zip(row.iter_mut()) {
            *out = if mask.allows(r, c) {
                let s = tau * dot(q_row, &k[c * dim..(c + 1) * dim]);
                if !s.is_finite() {
                    bail!(Numeric, "logit for query slot {r}, key slot {c} overflowed");
                }
                s
            } else {
                T::neg_infinity()
            };
        }
    }
    Ok(())
}

struct SliceOut<'o, T> {
    o: &'o mut [T],
    m: &'o mut [T],
    l: &'o mut [T],
}

#[allow(clippy::too_many_arguments)]
fn forward_slice<T: Element>(
    q: &[T],
    k: &[T],
    v: &[T],
    dim: usize,
    mask: &SliceMask<'_>,
    ranges: &[TileRange],
    blocks: BlockSpec,
    tau: T,
    out: SliceOut<'_, T>,
) -> Result<u64> {
    let (tq, tkv) = (q.len() / dim, k.len() / dim);
    let mut state = SoftmaxState::init(blocks.block_m, dim);
    let mut logits = vec![T::zero(); blocks.block_m * blocks.block_n];
    let mut tiles = 0u64;
    for (i, range) in ranges.iter().enumerate() {
        let (r0, r1) = bounds(tq, blocks.block_m, i);
        let rows = r1 - r0;
        state.reset(rows);
        for j in range.start..range.stop {
            let (c0, c1) = bounds(tkv, blocks.block_n, j);
            let tile = &mut logits[..rows * (c1 - c0)];
            fill_logits(tile, q, k, dim, mask, (r0, r1), (c0, c1), tau)?;
            state.update_unchecked(tile, c1 - c0, &v[c0 * dim..c1 * dim]);
            tiles += 1;
        }
        out.o[r0 * dim..r1 * dim].copy_from_slice(state.output());
        out.m[r0..r1].copy_from_slice(state.max());
        out.l[r0..r1].copy_from_slice(state.denom());
    }
    Ok(tiles)
}

/// Runs the forward pass over every `(batch, head)` slice.
pub fn forward<T: Element>(
    batch: &AttentionBatch<T>,
    indexing: &Indexing<'_>,
    blocks: BlockSpec,
) -> Result<FlashOutputs<T>> {
    batch.require_head_major()?;
    indexing.check(batch)?;
    let qs = batch.q.shape();
    let (tq, dim, heads) = (qs.len, qs.dim, qs.heads);
    let tau = T::from_f64(batch.scale.value());

    let mut o = Tensor4::zeros(qs, Layout::HeadMajor);
    let mut m = Grid3::filled(qs.batch, heads, tq, Layout::HeadMajor, T::neg_infinity());
    let mut l = Grid3::filled(qs.batch, heads, tq, Layout::HeadMajor, T::zero());

    let items: Vec<SliceOut<'_, T>> = o
        .data_mut()
        .chunks_mut(tq * dim)
        .zip(m.data_mut().chunks_mut(tq))
        .zip(l.data_mut().chunks_mut(tq))
        .map(|((o, m), l)| SliceOut { o, m, l })
        .collect();
    let results = par::map_items(items, |s, out| {
        let (b, h) = (s / heads, s % heads);
        let mask = indexing.slice(b, h);
        let ranges = mask.schedule(blocks);
        forward_slice(
            batch.q.slice(b, h),
            batch.k.slice(b, h),
            batch.v.slice(b, h),
            dim,
            &mask,
            &ranges,
            blocks,
            tau,
            out,
        )
    });
    let mut tiles_computed = 0u64;
    for r in results {
        tiles_computed += r?;
    }
    Ok(FlashOutputs {
        o,
        m,
        l,
        tiles_computed,
    })
}

struct SliceGrads<'g, T> {
    dq: &'g mut [T],
    dk: &'g mut [T],
    dv: &'g mut [T],
}

struct BackwardSlice<'s, T> {
    q: &'s [T],
    k: &'s [T],
    v: &'s [T],
    d_o: &'s [T],
    m: &'s [T],
    l: &'s [T],
    delta: Vec<T>,
    dim: usize,
    tau: T,
    mask: SliceMask<'s>,
}

impl<T: Element> BackwardSlice<'_, T> {
    /// Probabilities `P` and score gradients `dS` of one tile.
    fn tile(&self, rows: (usize, usize), cols: (usize, usize), p: &mut [T], ds: &mut [T]) -> Result<()> {
        let dim = self.dim;
        let width = cols.1 - cols.0;
        fill_logits(p, self.q, self.k, dim, &self.mask, rows, cols, self.tau)?;
        for (ri, r) in (rows.0..rows.1).enumerate() {
            let m = self.m[r];
            let m_hat = if m == T::neg_infinity() { T::zero() } else { m };
            let mut z = T::one() / self.l[r];
            if z == T::infinity() {
                z = T::one();
            }
            let do_row = &self.d_o[r * dim..(r + 1) * dim];
            let p_row = &mut p[ri * width..(ri + 1) * width];
            let ds_row = &mut ds[ri * width..(ri + 1) * width];
            for (ci, c) in (cols.0..cols.1).enumerate() {
                let pv = (p_row[ci] - m_hat).exp() * z;
                p_row[ci] = pv;
                ds_row[ci] = if pv == T::zero() {
                    T::zero()
                } else {
                    let dp = dot(do_row, &self.v[c * dim..(c + 1) * dim]);
                    pv * (dp - self.delta[r])
                };
            }
        }
        Ok(())
    }

    fn run(&self, ranges: &[TileRange], blocks: BlockSpec, out: SliceGrads<'_, T>) -> Result<()> {
        let dim = self.dim;
        let (tq, tkv) = (self.q.len() / dim, self.k.len() / dim);
        let mut p = vec![T::zero(); blocks.block_m * blocks.block_n];
        let mut ds = vec![T::zero(); blocks.block_m * blocks.block_n];

        // dQ: one pass per query block over its own tiles.
        for (i, range) in ranges.iter().enumerate() {
            let rows = bounds(tq, blocks.block_m, i);
            for j in range.start..range.stop {
                let cols = bounds(tkv, blocks.block_n, j);
                let width = cols.1 - cols.0;
                let n = (rows.1 - rows.0) * width;
                self.tile(rows, cols, &mut p[..n], &mut ds[..n])?;
                for (ri, r) in (rows.0..rows.1).enumerate() {
                    let dq_row = &mut out.dq[r * dim..(r + 1) * dim];
                    for (ci, c) in (cols.0..cols.1).enumerate() {
                        let g = ds[ri * width + ci];
                        if g != T::zero() {
                            axpy(dq_row, self.tau * g, &self.k[c * dim..(c + 1) * dim]);
                        }
                    }
                }
            }
        }

        // dK, dV: one pass per key block over the query blocks that visit it.
        let n_key_blocks = blocks.key_blocks(tkv);
        let mut visitors: Vec<Vec<usize>> = vec![Vec::new(); n_key_blocks];
        for (i, range) in ranges.iter().enumerate() {
            for list in &mut visitors[range.start..range.stop] {
                list.push(i);
            }
        }
        for (j, qblocks) in visitors.iter().enumerate() {
            let cols = bounds(tkv, blocks.block_n, j);
            let width = cols.1 - cols.0;
            for &i in qblocks {
                let rows = bounds(tq, blocks.block_m, i);
                let n = (rows.1 - rows.0) * width;
                self.tile(rows, cols, &mut p[..n], &mut ds[..n])?;
                for (ci, c) in (cols.0..cols.1).enumerate() {
                    let dk_row = &mut out.dk[c * dim..(c + 1) * dim];
                    for (ri, r) in (rows.0..rows.1).enumerate() {
                        let g = ds[ri * width + ci];
                        if g != T::zero() {
                            axpy(dk_row, self.tau * g, &self.q[r * dim..(r + 1) * dim]);
                        }
                    }
                    let dv_row = &mut out.dv[c * dim..(c + 1) * dim];
                    for (ri, r) in (rows.0..rows.1).enumerate() {
                        let pv = p[ri * width + ci];
                        if pv != T::zero() {
                            axpy(dv_row, pv, &self.d_o[r * dim..(r + 1) * dim]);
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// Runs the backward pass for outputs produced by [`forward`] on the same
/// batch and indexing.
pub fn backward<T: Element>(
    batch: &AttentionBatch<T>,
    indexing: &Indexing<'_>,
    outputs: &FlashOutputs<T>,
    d_o: &Tensor4<T>,
    blocks: BlockSpec,
) -> Result<Gradients<T>> {
    batch.require_head_major()?;
    indexing.check(batch)?;
    let qs = batch.q.shape();
    let ks = batch.k.shape();
    if outputs.o.shape() != qs || d_o.shape() != qs {
        bail!(
            Shape,
            "output / upstream gradient shapes must equal the query shape {qs:?}"
        );
    }
    if d_o.layout() != Layout::HeadMajor || outputs.o.layout() != Layout::HeadMajor {
        bail!(Shape, "output and upstream gradient must be head-major");
    }
    let stats_ok = |g: &Grid3<T>| {
        g.batch() == qs.batch && g.heads() == qs.heads && g.len() == qs.len && g.layout() == Layout::HeadMajor
    };
    if !stats_ok(&outputs.m) || !stats_ok(&outputs.l) {
        bail!(Shape, "softmax statistics M / L do not match {} queries", qs.len);
    }
    let (dim, heads) = (qs.dim, qs.heads);
    let tau = T::from_f64(batch.scale.value());

    let mut dq = Tensor4::zeros(qs, Layout::HeadMajor);
    let mut dk = Tensor4::zeros(ks, Layout::HeadMajor);
    let mut dv = Tensor4::zeros(ks, Layout::HeadMajor);
    let items: Vec<SliceGrads<'_, T>> = dq
        .data_mut()
        .chunks_mut(qs.len * dim)
        .zip(dk.data_mut().chunks_mut(ks.len * dim))
        .zip(dv.data_mut().chunks_mut(ks.len * dim))
        .map(|((dq, dk), dv)| SliceGrads { dq, dk, dv })
        .collect();
    let results = par::map_items(items, |s, out| {
        let (b, h) = (s / heads, s % heads);
        let o = outputs.o.slice(b, h);
        let d_o = d_o.slice(b, h);
        let delta = o.chunks(dim).zip(d_o.chunks(dim)).map(|(a, g)| dot(a, g)).collect();
        let slice = BackwardSlice {
            q: batch.q.slice(b, h),
            k: batch.k.slice(b, h),
            v: batch.v.slice(b, h),
            d_o,
            m: outputs.m.slice(b, h),
            l: outputs.l.slice(b, h),
            delta,
            dim,
            tau,
            mask: indexing.slice(b, h),
        };
        let ranges = slice.mask.schedule(blocks);
        slice.run(&ranges, blocks, out)
    });
    for r in results {
        r?;
    }
    Ok(Gradients { dq, dk, dv })
}

/// Identity positions `0..len` for every `(b, h)`.
pub fn identity_index(batch: usize, heads: usize, len: usize) -> Grid3<i64> {
    Grid3::from_fn(batch, heads, len, Layout::HeadMajor, |_, _, t| t as i64)
}
