//! QK-sparse attention: per-head dropping of queries and keys.
//!
//! Kept rows of every `(batch, head)` are gathered into a dense prefix in
//! their original time order ([`compact`]), padded to the largest kept count
//! over the whole grid, and their original positions are carried along as
//! padded index vectors ([`pad_index`]). The kernel skips every tile whose
//! keys all lie in the future of its queries and applies the causal mask
//! through the carried positions. Outputs are scattered back into a zero
//! tensor, so dropped query positions read as zero vectors.

use alloc::vec::Vec;

use crate::error::{bail, Result};
use crate::kernel::{self, Indexing};
use crate::tensor::{AttentionBatch, BlockSpec, Grid3, Layout, Scale, Shape4, Tensor4};
use crate::{Element, FlashOutputs, Gradients};

pub use crate::schedule::qk_tile_schedule;

/// Pad written into query index slots past the kept count.
pub const QUERY_PAD: i64 = -1;
/// Pad written into key index slots past the kept count.
pub const KEY_PAD: i64 = 1_000_000_000;

/// Result of gathering kept rows.
#[derive(Debug, Clone, PartialEq)]
pub struct CompactResult<T> {
    /// `(B, buffer, H, D)`, sequence-major.
    pub compact: Tensor4<T>,
    /// Original position of every compacted slot, `(B, buffer, H)`. Slots
    /// past the kept count hold dropped positions in time order.
    pub index: Grid3<usize>,
    /// Kept count per `(b, h)`, `b`-major. `None` when the index was supplied.
    pub indices_per_head: Option<Vec<usize>>,
}

impl<T> CompactResult<T> {
    pub fn buffer_size(&self) -> usize {
        self.index.len()
    }
}

/// Gathers kept rows of `x` (`(B, T, H, D)`) per `(b, h)` in time order.
///
/// `keep` is `(B, T, H)`. The buffer length is the maximum kept count over
/// the grid (at least one slot, so an all-dropped grid still yields a valid
/// pad-only buffer). When `index` is given (values sharing the key
/// compaction), it is used verbatim and `keep` only fixes the extents.
pub fn compact<T: Element>(
    keep: &Grid3<bool>,
    x: &Tensor4<T>,
    index: Option<&Grid3<usize>>,
) -> Result<CompactResult<T>> {
    let s = x.shape();
    if (keep.batch(), keep.len(), keep.heads()) != (s.batch, s.len, s.heads) {
        bail!(
            Shape,
            "keep mask ({}, {}, {}) does not match tensor {s:?}",
            keep.batch(),
            keep.len(),
            keep.heads()
        );
    }
    let (index, counts) = match index {
        Some(idx) => {
            if idx.batch() != s.batch || idx.heads() != s.heads {
                bail!(Shape, "supplied index grid does not match tensor {s:?}");
            }
            if let Some(&bad) = idx.data().iter().find(|&&p| p >= s.len) {
                bail!(Parameter, "supplied index {bad} out of range for length {}", s.len);
            }
            (idx.to_layout(Layout::SeqMajor), None)
        }
        None => {
            let mut orders = Vec::with_capacity(s.slices());
            let mut counts = Vec::with_capacity(s.slices());
            for b in 0..s.batch {
                for h in 0..s.heads {
                    // Stable partition: kept positions first, both halves in time order.
                    let mut order: Vec<usize> = (0..s.len).filter(|&t| keep.get(b, h, t)).collect();
                    counts.push(order.len());
                    order.extend((0..s.len).filter(|&t| !keep.get(b, h, t)));
                    orders.push(order);
                }
            }
            let buffer = counts.iter().copied().max().unwrap_or(0).max(1);
            let grid = Grid3::from_fn(s.batch, s.heads, buffer, Layout::SeqMajor, |b, h, t| {
                orders[b * s.heads + h][t]
            });
            (grid, Some(counts))
        }
    };
    let buffer = index.len();
    let cs = Shape4::new(s.batch, s.heads, buffer, s.dim)?;
    let mut out = Tensor4::zeros(cs, Layout::SeqMajor);
    for b in 0..s.batch {
        for t in 0..buffer {
            for h in 0..s.heads {
                let src = s.offset(x.layout(), b, h, index.get(b, h, t), 0);
                let dst = cs.offset(Layout::SeqMajor, b, h, t, 0);
                out.data_mut()[dst..dst + s.dim].copy_from_slice(&x.data()[src..src + s.dim]);
            }
        }
    }
    Ok(CompactResult {
        compact: out,
        index,
        indices_per_head: counts,
    })
}

/// Original positions of compacted slots, head-major `(B, H, buffer)`, with
/// every slot past the kept count set to `pad`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PaddedIndex {
    pub idx: Grid3<i64>,
    pub pad: i64,
}

impl PaddedIndex {
    /// Kept-count prefix of slice `(b, h)`: entries before the first pad.
    pub fn prefix_len(&self, b: usize, h: usize) -> usize {
        let s = self.idx.slice(b, h);
        s.iter().position(|&x| x == self.pad).unwrap_or(s.len())
    }

    /// Checks the non-pad prefix is strictly increasing and that pads only
    /// trail it.
    pub fn validate(&self) -> Result<()> {
        for b in 0..self.idx.batch() {
            for h in 0..self.idx.heads() {
                let s = self.idx.slice(b, h);
                let n = self.prefix_len(b, h);
                if let Some(w) = s[..n].windows(2).position(|w| w[0] >= w[1]) {
                    bail!(
                        Contract,
                        "index prefix of ({b}, {h}) not strictly increasing at slot {}",
                        w + 1
                    );
                }
                if s[n..].iter().any(|&x| x != self.pad) {
                    bail!(Contract, "index of ({b}, {h}) has real entries after a pad");
                }
                if s[..n].iter().any(|&x| x < 0) {
                    bail!(Contract, "index of ({b}, {h}) holds a negative position");
                }
            }
        }
        Ok(())
    }
}

/// Overwrites slots at or past `indices_per_head[b * H + h]` with `pad` and
/// returns the head-major copy.
pub fn pad_index(index: &Grid3<usize>, indices_per_head: &[usize], pad: i64) -> Result<PaddedIndex> {
    let (nb, nh, buffer) = (index.batch(), index.heads(), index.len());
    if indices_per_head.len() != nb * nh {
        bail!(
            Shape,
            "expected {} kept counts, got {}",
            nb * nh,
            indices_per_head.len()
        );
    }
    if let Some(&c) = indices_per_head.iter().find(|&&c| c > buffer) {
        bail!(Parameter, "kept count {c} exceeds buffer size {buffer}");
    }
    let idx = Grid3::from_fn(nb, nh, buffer, Layout::HeadMajor, |b, h, t| {
        if t >= indices_per_head[b * nh + h] {
            pad
        } else {
            index.get(b, h, t) as i64
        }
    });
    Ok(PaddedIndex { idx, pad })
}

fn check_pads(q_idx: &PaddedIndex, k_idx: &PaddedIndex) -> Result<()> {
    if q_idx.pad >= 0 {
        bail!(Contract, "query pad {} must be negative", q_idx.pad);
    }
    q_idx.validate()?;
    k_idx.validate()?;
    let max_query = q_idx.idx.data().iter().copied().max().unwrap_or(-1);
    let max_key = k_idx
        .idx
        .data()
        .iter()
        .copied()
        .filter(|&x| x != k_idx.pad)
        .max()
        .unwrap_or(-1);
    if k_idx.pad <= max_query || k_idx.pad <= max_key {
        bail!(Contract, "key pad {} does not exceed every real position", k_idx.pad);
    }
    Ok(())
}

fn indexing<'a>(q_idx: &'a PaddedIndex, k_idx: &'a PaddedIndex) -> Indexing<'a> {
    Indexing::causal(&q_idx.idx, &k_idx.idx)
}

/// Forward pass over compacted head-major operands.
pub fn qk_forward_kernel<T: Element>(
    compact: &AttentionBatch<T>,
    q_idx: &PaddedIndex,
    k_idx: &PaddedIndex,
    blocks: BlockSpec,
) -> Result<FlashOutputs<T>> {
    check_pads(q_idx, k_idx)?;
    kernel::forward(compact, &indexing(q_idx, k_idx), blocks)
}

/// Backward pass matching [`qk_forward_kernel`].
pub fn qk_backward_kernel<T: Element>(
    compact: &AttentionBatch<T>,
    q_idx: &PaddedIndex,
    k_idx: &PaddedIndex,
    outputs: &FlashOutputs<T>,
    d_o: &Tensor4<T>,
    blocks: BlockSpec,
) -> Result<Gradients<T>> {
    check_pads(q_idx, k_idx)?;
    kernel::backward(compact, &indexing(q_idx, k_idx), outputs, d_o, blocks)
}

/// Compacted, padded, head-major operands ready for the kernel, plus what is
/// needed to scatter results back.
#[derive(Debug, Clone)]
pub struct QkPrepared<T> {
    pub batch: AttentionBatch<T>,
    pub q_idx: PaddedIndex,
    pub k_idx: PaddedIndex,
    q_index: Grid3<usize>,
    k_index: Grid3<usize>,
    len_q: usize,
    len_kv: usize,
}

/// Compacts, pads and transposes sequence-major `(B, T, H, D)` operands.
pub fn qk_prepare<T: Element>(
    q: &Tensor4<T>,
    k: &Tensor4<T>,
    v: &Tensor4<T>,
    q_keep: &Grid3<bool>,
    k_keep: &Grid3<bool>,
    scale: Scale,
) -> Result<QkPrepared<T>> {
    let len_kv = k.shape().len;
    if len_kv as i64 >= KEY_PAD || q.shape().len as i64 >= KEY_PAD {
        bail!(Parameter, "sequence length must stay below the key pad {KEY_PAD}");
    }
    let qc = compact(q_keep, q, None)?;
    let kc = compact(k_keep, k, None)?;
    let vc = compact(k_keep, v, Some(&kc.index))?;
    let q_counts = qc.indices_per_head.as_deref().unwrap_or_default();
    let k_counts = kc.indices_per_head.as_deref().unwrap_or_default();
    let q_idx = pad_index(&qc.index, q_counts, QUERY_PAD)?;
    let k_idx = pad_index(&kc.index, k_counts, KEY_PAD)?;
    let batch = AttentionBatch::with_scale(
        qc.compact.to_layout(Layout::HeadMajor),
        kc.compact.to_layout(Layout::HeadMajor),
        vc.compact.to_layout(Layout::HeadMajor),
        scale,
    )?;
    Ok(QkPrepared {
        batch,
        q_idx,
        k_idx,
        q_index: qc.index,
        k_index: kc.index,
        len_q: q.shape().len,
        len_kv,
    })
}

fn scatter<T: Element>(src: &Tensor4<T>, index: &Grid3<usize>, len: usize) -> Result<Tensor4<T>> {
    let s = src.shape();
    let full = s.with_len(len)?;
    let mut out = Tensor4::zeros(full, Layout::SeqMajor);
    for b in 0..s.batch {
        for h in 0..s.heads {
            for t in 0..s.len {
                let p = index.get(b, h, t);
                for d in 0..s.dim {
                    out.set(b, h, p, d, src.get(b, h, t, d));
                }
            }
        }
    }
    Ok(out)
}

impl<T: Element> QkPrepared<T> {
    pub fn forward(&self, blocks: BlockSpec) -> Result<FlashOutputs<T>> {
        qk_forward_kernel(&self.batch, &self.q_idx, &self.k_idx, blocks)
    }

    pub fn backward(&self, outputs: &FlashOutputs<T>, d_o: &Tensor4<T>, blocks: BlockSpec) -> Result<Gradients<T>> {
        qk_backward_kernel(&self.batch, &self.q_idx, &self.k_idx, outputs, d_o, blocks)
    }

    /// Compacted upstream gradient for [`QkPrepared::backward`], from a
    /// full-shape `(B, T, H, D)` tensor.
    pub fn gather_queries(&self, full: &Tensor4<T>) -> Result<Tensor4<T>> {
        let keep = Grid3::filled(
            full.shape().batch,
            full.shape().heads,
            full.shape().len,
            Layout::SeqMajor,
            true,
        );
        Ok(compact(&keep, full, Some(&self.q_index))?
            .compact
            .to_layout(Layout::HeadMajor))
    }

    /// Full-shape `(B, T_Q, H, D)` tensor from compacted query rows; dropped
    /// positions are zero.
    pub fn scatter_queries(&self, compact_rows: &Tensor4<T>) -> Result<Tensor4<T>> {
        scatter(compact_rows, &self.q_index, self.len_q)
    }

    /// Full-shape `(B, T_KV, H, D)` tensor from compacted key rows.
    pub fn scatter_keys(&self, compact_rows: &Tensor4<T>) -> Result<Tensor4<T>> {
        scatter(compact_rows, &self.k_index, self.len_kv)
    }
}

/// End-to-end QK-sparse attention over sequence-major `(B, T, H, D)`
/// operands with `(B, T, H)` keep flags. Returns `(B, T_Q, H, D)`.
pub fn qk_sparse_attention<T: Element>(
    q: &Tensor4<T>,
    k: &Tensor4<T>,
    v: &Tensor4<T>,
    q_keep: &Grid3<bool>,
    k_keep: &Grid3<bool>,
    scale: Scale,
    blocks: BlockSpec,
) -> Result<Tensor4<T>> {
    let prep = qk_prepare(q, k, v, q_keep, k_keep, scale)?;
    let out = prep.forward(blocks)?;
    prep.scatter_queries(&out.o)
}

/// Oracle mask equivalent to dropping: kept query `i` sees kept key `j`
/// iff `i >= j`. Dimensions are the full `(B, H, T_Q, T_KV)`.
pub fn keep_mask_spec(q_keep: &Grid3<bool>, k_keep: &Grid3<bool>) -> crate::oracle::MaskSpec {
    crate::oracle::MaskSpec::from_fn(
        q_keep.batch(),
        q_keep.heads(),
        q_keep.len(),
        k_keep.len(),
        |b, h, i, j| q_keep.get(b, h, i) && k_keep.get(b, h, j) && i >= j,
    )
}
