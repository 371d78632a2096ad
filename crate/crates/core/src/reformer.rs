//! Fixed-chunk LSH attention and collision coverage.
//!
//! After the bucket sort, the chunked baseline splits the sorted slots into
//! chunks of `c` and lets each query attend only to keys in its own chunk and
//! the one before, in addition to the causal and same-bucket conditions.
//! Buckets that straddle a chunk boundary lose pairs, so the fraction of
//! same-bucket causal pairs that are actually computed (the coverage) drops
//! below one. The banded hash-sparse schedule has no such window and covers
//! every pair.

use alloc::vec::Vec;

use crate::error::{bail, Result};
use crate::hash::{sort_by_bucket, BucketTensor, SortedBatch};
use crate::kernel;
use crate::oracle::MaskSpec;
use crate::schedule::hash_tile_range;
use crate::tensor::{AttentionBatch, BlockSpec, Grid3, Layout, Tensor4};
use crate::{Element, FlashOutputs, Gradients};

/// Chunk length over sorted slots.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChunkSpec(usize);

impl ChunkSpec {
    pub fn new(len: usize) -> Result<Self> {
        if len == 0 {
            bail!(Parameter, "chunk length must be >= 1");
        }
        Ok(Self(len))
    }

    pub fn value(self) -> usize {
        self.0
    }
}

/// Same-bucket causal pairs and how many of them a method computes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CoverageReport {
    pub required_pairs: u64,
    pub covered_pairs: u64,
}

impl CoverageReport {
    /// `covered / required`, or `1.0` when nothing is required.
    pub fn coverage(&self) -> f64 {
        if self.required_pairs == 0 {
            1.0
        } else {
            self.covered_pairs as f64 / self.required_pairs as f64
        }
    }
}

impl core::ops::AddAssign for CoverageReport {
    fn add_assign(&mut self, rhs: Self) {
        self.required_pairs += rhs.required_pairs;
        self.covered_pairs += rhs.covered_pairs;
    }
}

/// Forward pass of the chunked baseline over bucket-sorted operands.
pub fn reformer_forward_kernel<T: Element>(
    sorted: &SortedBatch<T>,
    chunk: ChunkSpec,
    blocks: BlockSpec,
    exclude_self: bool,
) -> Result<FlashOutputs<T>> {
    sorted.validate()?;
    let mut indexing = sorted.indexing(exclude_self);
    indexing.chunk = Some(chunk.value());
    kernel::forward(&sorted.batch, &indexing, blocks)
}

/// Backward pass matching [`reformer_forward_kernel`].
pub fn reformer_backward_kernel<T: Element>(
    sorted: &SortedBatch<T>,
    outputs: &FlashOutputs<T>,
    d_o: &Tensor4<T>,
    chunk: ChunkSpec,
    blocks: BlockSpec,
    exclude_self: bool,
) -> Result<Gradients<T>> {
    sorted.validate()?;
    let mut indexing = sorted.indexing(exclude_self);
    indexing.chunk = Some(chunk.value());
    kernel::backward(&sorted.batch, &indexing, outputs, d_o, blocks)
}

/// Chunked LSH attention; the output is in original order and in the
/// layout of `batch.q`.
pub fn reformer_attention<T: Element>(
    batch: &AttentionBatch<T>,
    q_hash: &BucketTensor,
    k_hash: &BucketTensor,
    chunk: ChunkSpec,
    blocks: BlockSpec,
    exclude_self: bool,
) -> Result<Tensor4<T>> {
    let sorted = sort_by_bucket(batch, q_hash, k_hash)?;
    let out = reformer_forward_kernel(&sorted, chunk, blocks, exclude_self)?;
    sorted.scatter_queries(&out.o, batch.q.layout())
}

/// Bucket-sorted view of one slice: `(hash, position)` per slot.
fn sorted_slice(ids: &[u32]) -> (Vec<u32>, Vec<i64>) {
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.sort_by_key(|&t| ids[t]);
    (
        order.iter().map(|&t| ids[t]).collect(),
        order.iter().map(|&t| t as i64).collect(),
    )
}

/// Counts required pairs and those whose key slot lies in `window(p)` for
/// query slot `p`. Both sides are bucket-sorted.
fn count_slice(
    q: (&[u32], &[i64]),
    k: (&[u32], &[i64]),
    exclude_self: bool,
    window: impl Fn(usize) -> (usize, usize),
) -> CoverageReport {
    let (q_hash, q_idx) = q;
    let (k_hash, k_idx) = k;
    let mut report = CoverageReport::default();
    for p in 0..q_hash.len() {
        let g = q_hash[p];
        let lo = k_hash.partition_point(|&x| x < g);
        let hi = k_hash.partition_point(|&x| x <= g);
        // Keys of one bucket are in time order.
        let visible = k_idx[lo..hi].partition_point(|&j| if exclude_self { j < q_idx[p] } else { j <= q_idx[p] });
        let (w0, w1) = window(p);
        let (a, b) = (lo.max(w0), (lo + visible).min(w1));
        report.required_pairs += visible as u64;
        report.covered_pairs += b.saturating_sub(a) as u64;
    }
    report
}

fn check_pair(q_hash: &BucketTensor, k_hash: &BucketTensor) -> Result<(Grid3<u32>, Grid3<u32>)> {
    let (q, k) = (q_hash.ids(), k_hash.ids());
    if q.batch() != k.batch() || q.heads() != k.heads() {
        bail!(Shape, "query and key bucket grids disagree on (B, H)");
    }
    Ok((q.to_layout(Layout::HeadMajor), k.to_layout(Layout::HeadMajor)))
}

fn coverage_with(
    q_hash: &BucketTensor,
    k_hash: &BucketTensor,
    exclude_self: bool,
    window: impl Fn(usize) -> (usize, usize),
) -> Result<CoverageReport> {
    let (q, k) = check_pair(q_hash, k_hash)?;
    let mut total = CoverageReport::default();
    for b in 0..q.batch() {
        for h in 0..q.heads() {
            let qs = sorted_slice(q.slice(b, h));
            let ks = sorted_slice(k.slice(b, h));
            total += count_slice((&qs.0, &qs.1), (&ks.0, &ks.1), exclude_self, &window);
        }
    }
    Ok(total)
}

/// Fraction of same-bucket causal pairs inside the chunk window.
pub fn lsh_coverage(
    q_hash: &BucketTensor,
    k_hash: &BucketTensor,
    chunk: ChunkSpec,
    exclude_self: bool,
) -> Result<CoverageReport> {
    let c = chunk.value();
    coverage_with(q_hash, k_hash, exclude_self, |p| {
        let qc = p / c;
        (qc.saturating_sub(1) * c, (qc + 1) * c)
    })
}

/// Fraction of same-bucket causal pairs inside the banded tile range of the
/// hash-sparse schedule.
pub fn hash_sparse_coverage(
    q_hash: &BucketTensor,
    k_hash: &BucketTensor,
    blocks: BlockSpec,
    exclude_self: bool,
) -> Result<CoverageReport> {
    // The schedule depends only on the sorted slices; compute it once per
    // slice rather than per query.
    let (q, k) = check_pair(q_hash, k_hash)?;
    let mut total = CoverageReport::default();
    for b in 0..q.batch() {
        for h in 0..q.heads() {
            let qs = sorted_slice(q.slice(b, h));
            let ks = sorted_slice(k.slice(b, h));
            let ranges = hash_tile_range(&qs.0, &qs.1, &ks.0, &ks.1, blocks);
            total += count_slice((&qs.0, &qs.1), (&ks.0, &ks.1), exclude_self, |p| {
                let r = ranges[p / blocks.block_m];
                (r.start * blocks.block_n, r.stop * blocks.block_n)
            });
        }
    }
    Ok(total)
}

/// Oracle mask of the chunked baseline in original positions: causal, same
/// bucket, and sorted key slot within the two-chunk window of the query.
pub fn chunk_mask_spec(
    q_hash: &BucketTensor,
    k_hash: &BucketTensor,
    chunk: ChunkSpec,
    exclude_self: bool,
) -> Result<MaskSpec> {
    let (q, k) = check_pair(q_hash, k_hash)?;
    let heads = q.heads();
    let slots = |g: &Grid3<u32>| -> Vec<Vec<usize>> {
        (0..g.batch() * heads)
            .map(|s| {
                let (_, pos) = sorted_slice(g.slice(s / heads, s % heads));
                let mut slot = alloc::vec![0; pos.len()];
                for (p, &t) in pos.iter().enumerate() {
                    slot[t as usize] = p;
                }
                slot
            })
            .collect()
    };
    let (qs, ks) = (slots(&q), slots(&k));
    let c = chunk.value();
    Ok(MaskSpec::from_fn(q.batch(), heads, q.len(), k.len(), |b, h, i, j| {
        let causal = if exclude_self { i > j } else { i >= j };
        let (qc, kc) = (qs[b * heads + h][i] / c, ks[b * heads + h][j] / c);
        causal && q.get(b, h, i) == k.get(b, h, j) && kc <= qc && kc + 1 >= qc
    }))
}
