//! Dense tensor storage shared by every kernel.
//!
//! Attention operands are rank-4 `(batch, heads, length, dim)` tensors. The
//! kernels work on the head-major layout `(B, H, T, D)` where one
//! `(batch, head)` pair is a contiguous `T x D` matrix. End-to-end entry
//! points accept the sequence-major layout `(B, T, H, D)` and transpose.

use alloc::vec::Vec;

use crate::error::{bail, Result};
use crate::Element;

/// Memory order of a rank-4 tensor or a rank-3 per-position grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Layout {
    /// `(B, H, T, D)`: each `(b, h)` slice is contiguous.
    HeadMajor,
    /// `(B, T, H, D)`: the boundary layout of the end-to-end operations.
    SeqMajor,
}

/// Extents of an attention operand. All extents are at least one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape4 {
    pub batch: usize,
    pub heads: usize,
    pub len: usize,
    pub dim: usize,
}

impl Shape4 {
    pub fn new(batch: usize, heads: usize, len: usize, dim: usize) -> Result<Self> {
        if batch == 0 || heads == 0 || len == 0 || dim == 0 {
            bail!(
                Shape,
                "all extents must be >= 1, got (B={batch}, H={heads}, T={len}, D={dim})"
            );
        }
        Ok(Self { batch, heads, len, dim })
    }

    pub fn numel(&self) -> usize {
        self.batch * self.heads * self.len * self.dim
    }

    /// Number of `(batch, head)` slices.
    pub fn slices(&self) -> usize {
        self.batch * self.heads
    }

    pub fn with_len(&self, len: usize) -> Result<Self> {
        Self::new(self.batch, self.heads, len, self.dim)
    }

    /// Offset of `(b, h, t, d)` in a buffer with the given layout.
    #[inline]
    pub fn offset(&self, layout: Layout, b: usize, h: usize, t: usize, d: usize) -> usize {
        match layout {
            Layout::HeadMajor => ((b * self.heads + h) * self.len + t) * self.dim + d,
            Layout::SeqMajor => ((b * self.len + t) * self.heads + h) * self.dim + d,
        }
    }
}

/// A rank-4 floating-point tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4<T> {
    shape: Shape4,
    layout: Layout,
    data: Vec<T>,
}

impl<T: Element> Tensor4<T> {
    /// Wraps a buffer, checking its length and that every value is finite.
    pub fn from_vec(shape: Shape4, layout: Layout, data: Vec<T>) -> Result<Self> {
        if data.len() != shape.numel() {
            bail!(
                Shape,
                "buffer holds {} values but shape {:?} needs {}",
                data.len(),
                shape,
                shape.numel()
            );
        }
        if let Some(pos) = data.iter().position(|x| !x.is_finite()) {
            bail!(Numeric, "non-finite value at flat offset {pos}");
        }
        Ok(Self { shape, layout, data })
    }

    pub(crate) fn from_raw(shape: Shape4, layout: Layout, data: Vec<T>) -> Self {
        debug_assert_eq!(data.len(), shape.numel());
        Self { shape, layout, data }
    }

    pub fn zeros(shape: Shape4, layout: Layout) -> Self {
        Self::from_raw(shape, layout, alloc::vec![T::zero(); shape.numel()])
    }

    pub fn shape(&self) -> Shape4 {
        self.shape
    }

    pub fn layout(&self) -> Layout {
        self.layout
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, b: usize, h: usize, t: usize, d: usize) -> T {
        self.data[self.shape.offset(self.layout, b, h, t, d)]
    }

    #[inline]
    pub fn set(&mut self, b: usize, h: usize, t: usize, d: usize, value: T) {
        let off = self.shape.offset(self.layout, b, h, t, d);
        self.data[off] = value;
    }

    /// The contiguous `T x D` matrix of one `(b, h)` pair. Head-major only.
    pub fn slice(&self, b: usize, h: usize) -> &[T] {
        assert_eq!(self.layout, Layout::HeadMajor, "slice() needs head-major layout");
        let n = self.shape.len * self.shape.dim;
        let start = (b * self.shape.heads + h) * n;
        &self.data[start..start + n]
    }

    /// Row `t` of slice `(b, h)` as a `D`-vector. Head-major only.
    pub fn row(&self, b: usize, h: usize, t: usize) -> &[T] {
        let d = self.shape.dim;
        &self.slice(b, h)[t * d..(t + 1) * d]
    }

    /// Returns a copy in the requested layout (a clone if it already matches).
    pub fn to_layout(&self, layout: Layout) -> Self {
        if layout == self.layout {
            return self.clone();
        }
        let s = self.shape;
        let mut out = alloc::vec![T::zero(); s.numel()];
        for b in 0..s.batch {
            for t in 0..s.len {
                for h in 0..s.heads {
                    let src = s.offset(self.layout, b, h, t, 0);
                    let dst = s.offset(layout, b, h, t, 0);
                    out[dst..dst + s.dim].copy_from_slice(&self.data[src..src + s.dim]);
                }
            }
        }
        Self::from_raw(s, layout, out)
    }

    pub fn cast<U: Element>(&self) -> Tensor4<U> {
        Tensor4 {
            shape: self.shape,
            layout: self.layout,
            data: self.data.iter().map(|&x| U::from_f64(x.as_f64())).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// A rank-3 per-position grid `(batch, heads, len)`: indices, bucket ids,
/// keep flags and softmax statistics.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Grid3<V> {
    batch: usize,
    heads: usize,
    len: usize,
    layout: Layout,
    data: Vec<V>,
}

impl<V: Copy> Grid3<V> {
    pub fn from_vec(batch: usize, heads: usize, len: usize, layout: Layout, data: Vec<V>) -> Result<Self> {
        if batch == 0 || heads == 0 || len == 0 {
            bail!(Shape, "grid extents must be >= 1, got ({batch}, {heads}, {len})");
        }
        if data.len() != batch * heads * len {
            bail!(
                Shape,
                "grid buffer holds {} values, expected {}",
                data.len(),
                batch * heads * len
            );
        }
        Ok(Self {
            batch,
            heads,
            len,
            layout,
            data,
        })
    }

    pub fn filled(batch: usize, heads: usize, len: usize, layout: Layout, value: V) -> Self {
        Self {
            batch,
            heads,
            len,
            layout,
            data: alloc::vec![value; batch * heads * len],
        }
    }

    /// Builds a grid by evaluating `f(b, h, t)` at every position.
    pub fn from_fn(
        batch: usize,
        heads: usize,
        len: usize,
        layout: Layout,
        mut f: impl FnMut(usize, usize, usize) -> V,
    ) -> Self {
        let mut data = Vec::with_capacity(batch * heads * len);
        match layout {
            Layout::HeadMajor => {
                for b in 0..batch {
                    for h in 0..heads {
                        for t in 0..len {
                            data.push(f(b, h, t));
                        }
                    }
                }
            }
            Layout::SeqMajor => {
                for b in 0..batch {
                    for t in 0..len {
                        for h in 0..heads {
                            data.push(f(b, h, t));
                        }
                    }
                }
            }
        }
        Self {
            batch,
            heads,
            len,
            layout,
            data,
        }
    }

    pub fn batch(&self) -> usize {
        self.batch
    }
    pub fn heads(&self) -> usize {
        self.heads
    }
    pub fn len(&self) -> usize {
        self.len
    }
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
    pub fn layout(&self) -> Layout {
        self.layout
    }
    pub fn data(&self) -> &[V] {
        &self.data
    }
    pub fn data_mut(&mut self) -> &mut [V] {
        &mut self.data
    }

    #[inline]
    fn offset(&self, b: usize, h: usize, t: usize) -> usize {
        match self.layout {
            Layout::HeadMajor => (b * self.heads + h) * self.len + t,
            Layout::SeqMajor => (b * self.len + t) * self.heads + h,
        }
    }

    #[inline]
    pub fn get(&self, b: usize, h: usize, t: usize) -> V {
        self.data[self.offset(b, h, t)]
    }

    #[inline]
    pub fn set(&mut self, b: usize, h: usize, t: usize, value: V) {
        let off = self.offset(b, h, t);
        self.data[off] = value;
    }

    /// The contiguous length-`T` row of one `(b, h)` pair. Head-major only.
    pub fn slice(&self, b: usize, h: usize) -> &[V] {
        assert_eq!(self.layout, Layout::HeadMajor, "slice() needs head-major layout");
        let start = (b * self.heads + h) * self.len;
        &self.data[start..start + self.len]
    }

    pub fn to_layout(&self, layout: Layout) -> Self {
        if layout == self.layout {
            return self.clone();
        }
        Self::from_fn(self.batch, self.heads, self.len, layout, |b, h, t| self.get(b, h, t))
    }

    pub fn map<U: Copy>(&self, f: impl Fn(V) -> U) -> Grid3<U> {
        Grid3 {
            batch: self.batch,
            heads: self.heads,
            len: self.len,
            layout: self.layout,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub(crate) fn same_grid<U>(&self, other: &Grid3<U>) -> bool {
        self.batch == other.batch && self.heads == other.heads && self.len == other.len
    }
}

/// Query and key block sizes of the tiling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BlockSpec {
    pub block_m: usize,
    pub block_n: usize,
}

impl BlockSpec {
    pub fn new(block_m: usize, block_n: usize) -> Result<Self> {
        if block_m == 0 || block_n == 0 {
            bail!(Parameter, "block sizes must be >= 1, got ({block_m}, {block_n})");
        }
        Ok(Self { block_m, block_n })
    }

    pub fn square(block: usize) -> Result<Self> {
        Self::new(block, block)
    }

    pub fn query_blocks(&self, len_q: usize) -> usize {
        len_q.div_ceil(self.block_m)
    }

    pub fn key_blocks(&self, len_kv: usize) -> usize {
        len_kv.div_ceil(self.block_n)
    }
}

impl Default for BlockSpec {
    fn default() -> Self {
        Self {
            block_m: 64,
            block_n: 64,
        }
    }
}

/// Softmax scaling constant `tau > 0` applied to query-key dot products.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scale(f64);

impl Scale {
    pub fn new(tau: f64) -> Result<Self> {
        if !(tau.is_finite() && tau > 0.0) {
            bail!(Parameter, "softmax scale must be finite and > 0, got {tau}");
        }
        Ok(Self(tau))
    }

    /// `1 / sqrt(dim)`.
    pub fn for_dim(dim: usize) -> Self {
        Self(1.0 / num_traits::Float::sqrt(dim as f64))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

/// Query, key and value operands plus the softmax scale.
///
/// Queries have length `T_Q`, keys and values share length `T_KV`; batch,
/// heads and head dimension agree across the three.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionBatch<T> {
    pub q: Tensor4<T>,
    pub k: Tensor4<T>,
    pub v: Tensor4<T>,
    pub scale: Scale,
}

impl<T: Element> AttentionBatch<T> {
    /// Builds a batch with the default scale `1/sqrt(D)`.
    pub fn new(q: Tensor4<T>, k: Tensor4<T>, v: Tensor4<T>) -> Result<Self> {
        let scale = Scale::for_dim(q.shape().dim);
        Self::with_scale(q, k, v, scale)
    }

    pub fn with_scale(q: Tensor4<T>, k: Tensor4<T>, v: Tensor4<T>, scale: Scale) -> Result<Self> {
        let (qs, ks, vs) = (q.shape(), k.shape(), v.shape());
        if ks != vs {
            bail!(Shape, "key shape {ks:?} differs from value shape {vs:?}");
        }
        if qs.batch != ks.batch || qs.heads != ks.heads || qs.dim != ks.dim {
            bail!(Shape, "query shape {qs:?} incompatible with key shape {ks:?}");
        }
        if q.layout() != k.layout() || k.layout() != v.layout() {
            bail!(Shape, "q, k and v must share a layout");
        }
        Ok(Self { q, k, v, scale })
    }

    pub fn layout(&self) -> Layout {
        self.q.layout()
    }

    pub fn len_q(&self) -> usize {
        self.q.shape().len
    }

    pub fn len_kv(&self) -> usize {
        self.k.shape().len
    }

    pub fn to_layout(&self, layout: Layout) -> Self {
        Self {
            q: self.q.to_layout(layout),
            k: self.k.to_layout(layout),
            v: self.v.to_layout(layout),
            scale: self.scale,
        }
    }

    pub fn cast<U: Element>(&self) -> AttentionBatch<U> {
        AttentionBatch {
            q: self.q.cast(),
            k: self.k.cast(),
            v: self.v.cast(),
            scale: self.scale,
        }
    }

    pub(crate) fn require_head_major(&self) -> Result<()> {
        if self.layout() != Layout::HeadMajor {
            bail!(Shape, "kernel operands must be head-major (B, H, T, D)");
        }
        Ok(())
    }
}
