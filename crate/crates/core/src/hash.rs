//! Hash-sparse attention: causal attention restricted to pairs that share a
//! bucket.
//!
//! Queries and keys of each `(batch, head)` are stably sorted by bucket id,
//! so a bucket occupies a contiguous run of slots and ties keep time order.
//! The kernel visits a banded range of key blocks per query block (the
//! blocks whose bucket span overlaps the query block's, cut off at the last
//! block that is not entirely in the future) and masks each tile with
//! `q_idx >= k_idx && q_hash == k_hash`. Results are scattered back to the
//! original order.

use alloc::vec::Vec;

use num_traits::Float;

use crate::error::{bail, Result};
use crate::kernel::{self, Indexing};
use crate::rng::{normal_vec, stream, Domain};
use crate::tensor::{AttentionBatch, BlockSpec, Grid3, Layout, Scale, Tensor4};
use crate::{Element, FlashOutputs, Gradients};

pub use crate::schedule::hash_tile_range;

/// Bucket ids in `[0, nb)`, `(B, T, H)` positions in either layout.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BucketTensor {
    ids: Grid3<u32>,
    nb: u32,
}

impl BucketTensor {
    pub fn new(ids: Grid3<u32>, nb: u32) -> Result<Self> {
        if nb == 0 {
            bail!(Parameter, "bucket count must be >= 1");
        }
        if let Some(&bad) = ids.data().iter().find(|&&x| x >= nb) {
            bail!(Parameter, "bucket id {bad} outside [0, {nb})");
        }
        Ok(Self { ids, nb })
    }

    pub fn ids(&self) -> &Grid3<u32> {
        &self.ids
    }

    pub fn nb(&self) -> u32 {
        self.nb
    }
}

/// Angular LSH: per `(b, h)` a projection `R` of shape `D x nb/2` is drawn
/// from the projection stream of `seed`, and each row is assigned the argmax
/// of `[xR, -xR]`. `nb` must be even and at least 2.
pub fn lsh_buckets<T: Element>(x: &Tensor4<T>, nb: u32, seed: u64) -> Result<BucketTensor> {
    if nb < 2 || nb % 2 != 0 {
        bail!(Parameter, "LSH bucket count must be even and >= 2, got {nb}");
    }
    let s = x.shape();
    let half = (nb / 2) as usize;
    let mut ids = Grid3::filled(s.batch, s.heads, s.len, x.layout(), 0u32);
    let mut proj = alloc::vec![0.0f64; half];
    for b in 0..s.batch {
        for h in 0..s.heads {
            let r = normal_vec(&mut stream(seed, Domain::Projection, b * s.heads + h), s.dim * half);
            for t in 0..s.len {
                proj.iter_mut().for_each(|p| *p = 0.0);
                for d in 0..s.dim {
                    let xd = x.get(b, h, t, d).as_f64();
                    for (p, &rv) in proj.iter_mut().zip(&r[d * half..(d + 1) * half]) {
                        *p += xd * rv;
                    }
                }
                let mut best = 0usize;
                let mut best_val = f64::NEG_INFINITY;
                for (c, val) in proj.iter().copied().chain(proj.iter().map(|&p| -p)).enumerate() {
                    if val > best_val {
                        best = c;
                        best_val = val;
                    }
                }
                ids.set(b, h, t, best as u32);
            }
        }
    }
    BucketTensor::new(ids, nb)
}

/// Rows scaled to unit Euclidean norm. Zero rows are a numeric error.
pub fn normalize_keys<T: Element>(q: &Tensor4<T>) -> Result<Tensor4<T>> {
    let mut out = q.clone();
    // The last axis is contiguous in both layouts.
    for row in out.data_mut().chunks_mut(q.shape().dim) {
        normalize_row(row)?;
    }
    Ok(out)
}

fn normalize_row<T: Element>(row: &mut [T]) -> Result<()> {
    let norm: f64 = Float::sqrt(row.iter().map(|x| x.as_f64() * x.as_f64()).sum::<f64>());
    if norm == 0.0 {
        bail!(Numeric, "cannot normalize a zero row");
    }
    for x in row.iter_mut() {
        *x = T::from_f64(x.as_f64() / norm);
    }
    Ok(())
}

/// Head-major operands sorted by bucket, with the original positions and
/// bucket ids of every slot.
#[derive(Debug, Clone)]
pub struct SortedBatch<T> {
    pub batch: AttentionBatch<T>,
    pub q_idx: Grid3<i64>,
    pub k_idx: Grid3<i64>,
    pub q_hash: Grid3<u32>,
    pub k_hash: Grid3<u32>,
    pub nb: u32,
}

fn stable_order(ids: &[u32]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.sort_by_key(|&t| ids[t]);
    order
}

fn gather_rows<T: Element>(x: &Tensor4<T>, orders: &[Vec<usize>]) -> Tensor4<T> {
    let s = x.shape();
    let mut out = Tensor4::zeros(s, Layout::HeadMajor);
    let dst = out.data_mut();
    for b in 0..s.batch {
        for h in 0..s.heads {
            let order = &orders[b * s.heads + h];
            for (slot, &t) in order.iter().enumerate() {
                let from = s.offset(x.layout(), b, h, t, 0);
                let to = s.offset(Layout::HeadMajor, b, h, slot, 0);
                dst[to..to + s.dim].copy_from_slice(&x.data()[from..from + s.dim]);
            }
        }
    }
    out
}

fn check_hashes<T: Element>(x: &Tensor4<T>, hashes: &BucketTensor, what: &str) -> Result<()> {
    let (s, g) = (x.shape(), hashes.ids());
    if (g.batch(), g.heads(), g.len()) != (s.batch, s.heads, s.len) {
        bail!(
            Shape,
            "{what} buckets ({}, {}, {}) do not match operand {s:?}",
            g.batch(),
            g.heads(),
            g.len()
        );
    }
    Ok(())
}

/// Stable sort of queries and keys (values follow keys) by bucket id.
/// Accepts operands in either layout; the result is head-major.
pub fn sort_by_bucket<T: Element>(
    batch: &AttentionBatch<T>,
    q_hash: &BucketTensor,
    k_hash: &BucketTensor,
) -> Result<SortedBatch<T>> {
    check_hashes(&batch.q, q_hash, "query")?;
    check_hashes(&batch.k, k_hash, "key")?;
    if q_hash.nb() != k_hash.nb() {
        bail!(
            Parameter,
            "query and key bucket counts differ: {} vs {}",
            q_hash.nb(),
            k_hash.nb()
        );
    }
    let (qs, ks) = (batch.q.shape(), batch.k.shape());
    let orders = |g: &Grid3<u32>| -> Vec<Vec<usize>> {
        let hm = g.to_layout(Layout::HeadMajor);
        (0..qs.batch * qs.heads)
            .map(|s| stable_order(hm.slice(s / qs.heads, s % qs.heads)))
            .collect()
    };
    let q_order = orders(q_hash.ids());
    let k_order = orders(k_hash.ids());
    let idx_grid = |o: &[Vec<usize>], len| {
        Grid3::from_fn(qs.batch, qs.heads, len, Layout::HeadMajor, |b, h, t| {
            o[b * qs.heads + h][t] as i64
        })
    };
    let hash_grid = |o: &[Vec<usize>], g: &Grid3<u32>, len| {
        Grid3::from_fn(qs.batch, qs.heads, len, Layout::HeadMajor, |b, h, t| {
            g.get(b, h, o[b * qs.heads + h][t])
        })
    };
    Ok(SortedBatch {
        batch: AttentionBatch::with_scale(
            gather_rows(&batch.q, &q_order),
            gather_rows(&batch.k, &k_order),
            gather_rows(&batch.v, &k_order),
            batch.scale,
        )?,
        q_idx: idx_grid(&q_order, qs.len),
        k_idx: idx_grid(&k_order, ks.len),
        q_hash: hash_grid(&q_order, q_hash.ids(), qs.len),
        k_hash: hash_grid(&k_order, k_hash.ids(), ks.len),
        nb: q_hash.nb(),
    })
}

fn check_sorted(idx: &Grid3<i64>, hash: &Grid3<u32>, what: &str) -> Result<()> {
    let mut seen = alloc::vec![false; idx.len()];
    for b in 0..idx.batch() {
        for h in 0..idx.heads() {
            let (is, hs) = (idx.slice(b, h), hash.slice(b, h));
            seen.iter_mut().for_each(|x| *x = false);
            for &i in is {
                let Some(slot) = usize::try_from(i).ok().filter(|&u| u < seen.len()) else {
                    bail!(Contract, "{what} position {i} out of range in ({b}, {h})");
                };
                if core::mem::replace(&mut seen[slot], true) {
                    bail!(Contract, "{what} position {i} repeated in ({b}, {h})");
                }
            }
            for t in 1..is.len() {
                let ordered = hs[t - 1] < hs[t] || (hs[t - 1] == hs[t] && is[t - 1] < is[t]);
                if !ordered {
                    bail!(
                        Contract,
                        "{what} slots of ({b}, {h}) not sorted by (bucket, position) at {t}"
                    );
                }
            }
        }
    }
    Ok(())
}

impl<T: Element> SortedBatch<T> {
    /// Checks the sort contract: positions form a permutation and slots are
    /// ordered by bucket with time order inside a bucket.
    pub fn validate(&self) -> Result<()> {
        self.batch.require_head_major()?;
        for (g, len) in [(&self.q_idx, self.batch.len_q()), (&self.k_idx, self.batch.len_kv())] {
            if g.len() != len || g.layout() != Layout::HeadMajor {
                bail!(Shape, "sorted index grid does not match operands");
            }
        }
        if !self.q_hash.same_grid(&self.q_idx) || !self.k_hash.same_grid(&self.k_idx) {
            bail!(Shape, "sorted bucket grids do not match index grids");
        }
        check_sorted(&self.q_idx, &self.q_hash, "query")?;
        check_sorted(&self.k_idx, &self.k_hash, "key")
    }

    pub fn indexing(&self, exclude_self: bool) -> Indexing<'_> {
        Indexing {
            q_idx: &self.q_idx,
            k_idx: &self.k_idx,
            buckets: Some((&self.q_hash, &self.k_hash)),
            exclude_self,
            chunk: None,
        }
    }

    fn scatter(&self, x: &Tensor4<T>, idx: &Grid3<i64>, layout: Layout) -> Result<Tensor4<T>> {
        let s = x.shape();
        if s.batch != idx.batch() || s.heads != idx.heads() || s.len != idx.len() {
            bail!(Shape, "tensor {s:?} does not match the sorted grid");
        }
        let mut out = Tensor4::zeros(s, layout);
        for b in 0..s.batch {
            for h in 0..s.heads {
                for (slot, &t) in idx.slice(b, h).iter().enumerate() {
                    for d in 0..s.dim {
                        out.set(b, h, t as usize, d, x.get(b, h, slot, d));
                    }
                }
            }
        }
        Ok(out)
    }

    /// Query-sorted rows back in original order, in `layout`.
    pub fn scatter_queries(&self, x: &Tensor4<T>, layout: Layout) -> Result<Tensor4<T>> {
        self.scatter(x, &self.q_idx, layout)
    }

    /// Key-sorted rows back in original order, in `layout`.
    pub fn scatter_keys(&self, x: &Tensor4<T>, layout: Layout) -> Result<Tensor4<T>> {
        self.scatter(x, &self.k_idx, layout)
    }

    /// Rows of an original-order query-shaped tensor in sorted order
    /// (head-major), e.g. an upstream gradient.
    pub fn gather_queries(&self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        let s = x.shape();
        if s.batch != self.q_idx.batch() || s.heads != self.q_idx.heads() || s.len != self.q_idx.len() {
            bail!(Shape, "tensor {s:?} does not match the sorted query grid");
        }
        let orders: Vec<Vec<usize>> = (0..s.batch * s.heads)
            .map(|i| {
                self.q_idx
                    .slice(i / s.heads, i % s.heads)
                    .iter()
                    .map(|&t| t as usize)
                    .collect()
            })
            .collect();
        Ok(gather_rows(x, &orders))
    }
}

/// Forward pass over bucket-sorted operands.
pub fn hash_forward_kernel<T: Element>(
    sorted: &SortedBatch<T>,
    blocks: BlockSpec,
    exclude_self: bool,
) -> Result<FlashOutputs<T>> {
    sorted.validate()?;
    kernel::forward(&sorted.batch, &sorted.indexing(exclude_self), blocks)
}

/// Backward pass matching [`hash_forward_kernel`]; `d_o` is in sorted order.
pub fn hash_backward_kernel<T: Element>(
    sorted: &SortedBatch<T>,
    outputs: &FlashOutputs<T>,
    d_o: &Tensor4<T>,
    blocks: BlockSpec,
    exclude_self: bool,
) -> Result<Gradients<T>> {
    sorted.validate()?;
    kernel::backward(&sorted.batch, &sorted.indexing(exclude_self), outputs, d_o, blocks)
}

/// End-to-end hash-sparse attention over sequence-major `(B, T, H, D)`
/// operands. Returns `(B, T_Q, H, D)` in original order; queries without a
/// visible key read as zero rows.
#[allow(clippy::too_many_arguments)]
pub fn hash_sparse_attention<T: Element>(
    q: &Tensor4<T>,
    k: &Tensor4<T>,
    v: &Tensor4<T>,
    q_hash: &BucketTensor,
    k_hash: &BucketTensor,
    scale: Scale,
    blocks: BlockSpec,
    exclude_self: bool,
) -> Result<Tensor4<T>> {
    let batch = AttentionBatch::with_scale(q.clone(), k.clone(), v.clone(), scale)?;
    let sorted = sort_by_bucket(&batch, q_hash, k_hash)?;
    let out = hash_forward_kernel(&sorted, blocks, exclude_self)?;
    sorted.scatter_queries(&out.o, q.layout())
}
