//! Naive masked attention and finite-difference gradients.
//!
//! Everything here works on full `T_Q x T_KV` matrices in 64-bit arithmetic,
//! one row at a time, with no tiling and no streaming statistics. It is the
//! ground truth the tiled kernels are checked against and makes no attempt
//! to be fast.

use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;

use crate::error::{bail, Result};
use crate::tensor::{AttentionBatch, Grid3, Layout, Tensor4};
use crate::Element;

/// Boolean visibility matrices, one `T_Q x T_KV` matrix per `(b, h)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskSpec {
    batch: usize,
    heads: usize,
    len_q: usize,
    len_kv: usize,
    allowed: Vec<bool>,
}

impl MaskSpec {
    /// Builds a mask from an explicit predicate `f(b, h, i, j)`.
    pub fn from_fn(
        batch: usize,
        heads: usize,
        len_q: usize,
        len_kv: usize,
        mut f: impl FnMut(usize, usize, usize, usize) -> bool,
    ) -> Self {
        let mut allowed = Vec::with_capacity(batch * heads * len_q * len_kv);
        for b in 0..batch {
            for h in 0..heads {
                for i in 0..len_q {
                    for j in 0..len_kv {
                        allowed.push(f(b, h, i, j));
                    }
                }
            }
        }
        Self {
            batch,
            heads,
            len_q,
            len_kv,
            allowed,
        }
    }

    /// Plain causal mask over identical query and key positions.
    pub fn causal(batch: usize, heads: usize, len: usize) -> Self {
        Self::from_fn(batch, heads, len, len, |_, _, i, j| i >= j)
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        (self.batch, self.heads, self.len_q, self.len_kv)
    }

    #[inline]
    pub fn get(&self, b: usize, h: usize, i: usize, j: usize) -> bool {
        self.allowed[((b * self.heads + h) * self.len_q + i) * self.len_kv + j]
    }

    pub fn set(&mut self, b: usize, h: usize, i: usize, j: usize, value: bool) {
        let off = ((b * self.heads + h) * self.len_q + i) * self.len_kv + j;
        self.allowed[off] = value;
    }

    /// Row `i` of slice `(b, h)`.
    pub fn row(&self, b: usize, h: usize, i: usize) -> &[bool] {
        let off = ((b * self.heads + h) * self.len_q + i) * self.len_kv;
        &self.allowed[off..off + self.len_kv]
    }

    /// Number of visible pairs.
    pub fn count(&self) -> usize {
        self.allowed.iter().filter(|&&a| a).count()
    }

    fn check<T: Element>(&self, batch: &AttentionBatch<T>) -> Result<()> {
        let (qs, ks) = (batch.q.shape(), batch.k.shape());
        if (self.batch, self.heads, self.len_q, self.len_kv) != (qs.batch, qs.heads, qs.len, ks.len) {
            bail!(
                Shape,
                "mask dims {:?} do not match operands {qs:?} / {ks:?}",
                self.dims()
            );
        }
        Ok(())
    }
}

/// `allowed[i][j] = q_idx[i] >= k_idx[j]` (`>` with `exclude_self`), and
/// additionally `q_hash[i] == k_hash[j]` when buckets are given.
///
/// Grids may use either layout; `(B, H)` must agree.
pub fn build_mask(
    q_idx: &Grid3<i64>,
    k_idx: &Grid3<i64>,
    buckets: Option<(&Grid3<u32>, &Grid3<u32>)>,
    exclude_self: bool,
) -> Result<MaskSpec> {
    if q_idx.batch() != k_idx.batch() || q_idx.heads() != k_idx.heads() {
        bail!(Shape, "query and key index grids disagree on (B, H)");
    }
    if let Some((qh, kh)) = buckets {
        if !qh.same_grid(q_idx) || !kh.same_grid(k_idx) {
            bail!(Shape, "bucket grids do not match the index grids");
        }
    }
    Ok(MaskSpec::from_fn(
        q_idx.batch(),
        q_idx.heads(),
        q_idx.len(),
        k_idx.len(),
        |b, h, i, j| {
            let (qi, kj) = (q_idx.get(b, h, i), k_idx.get(b, h, j));
            let causal = if exclude_self { qi > kj } else { qi >= kj };
            causal && buckets.is_none_or(|(qh, kh)| qh.get(b, h, i) == kh.get(b, h, j))
        },
    ))
}

fn row_weights(q: &[f64], k: &[f64], dim: usize, tau: f64, allowed: &[bool], w: &mut [f64]) {
    let mut max = f64::NEG_INFINITY;
    for (j, (wj, &a)) in w.iter_mut().zip(allowed).enumerate() {
        if a {
            let s: f64 = q.iter().zip(&k[j * dim..(j + 1) * dim]).map(|(x, y)| x * y).sum();
            *wj = tau * s;
            max = max.max(*wj);
        }
    }
    if max == f64::NEG_INFINITY {
        w.iter_mut().for_each(|x| *x = 0.0);
        return;
    }
    let mut sum = 0.0;
    for (wj, &a) in w.iter_mut().zip(allowed) {
        *wj = if a { Float::exp(*wj - max) } else { 0.0 };
        sum += *wj;
    }
    w.iter_mut().for_each(|x| *x /= sum);
}

struct Slice64 {
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
}

impl Slice64 {
    fn component(&mut self, which: usize) -> &mut Vec<f64> {
        match which {
            0 => &mut self.q,
            1 => &mut self.k,
            _ => &mut self.v,
        }
    }
}

fn slice64<T: Element>(batch: &AttentionBatch<T>, b: usize, h: usize) -> Slice64 {
    let grab = |t: &Tensor4<T>| {
        let s = t.shape();
        let mut out = Vec::with_capacity(s.len * s.dim);
        for i in 0..s.len {
            for d in 0..s.dim {
                out.push(t.get(b, h, i, d).as_f64());
            }
        }
        out
    };
    Slice64 {
        q: grab(&batch.q),
        k: grab(&batch.k),
        v: grab(&batch.v),
    }
}

fn slice_output(s: &Slice64, dim: usize, tau: f64, mask: &MaskSpec, b: usize, h: usize) -> Vec<f64> {
    let (_, _, tq, tkv) = mask.dims();
    let mut out = vec![0.0; tq * dim];
    let mut w = vec![0.0; tkv];
    for i in 0..tq {
        row_weights(&s.q[i * dim..(i + 1) * dim], &s.k, dim, tau, mask.row(b, h, i), &mut w);
        let o = &mut out[i * dim..(i + 1) * dim];
        for (j, &wj) in w.iter().enumerate() {
            for (od, &vd) in o.iter_mut().zip(&s.v[j * dim..(j + 1) * dim]) {
                *od += wj * vd;
            }
        }
    }
    out
}

/// Row-softmax attention probabilities `(B, H, T_Q, T_KV)` flattened;
/// stranded rows are all zero.
pub fn attention_weights<T: Element>(batch: &AttentionBatch<T>, mask: &MaskSpec) -> Result<Vec<f64>> {
    mask.check(batch)?;
    let qs = batch.q.shape();
    let tkv = batch.len_kv();
    let tau = batch.scale.value();
    let mut out = vec![0.0; qs.slices() * qs.len * tkv];
    for b in 0..qs.batch {
        for h in 0..qs.heads {
            let s = slice64(batch, b, h);
            for i in 0..qs.len {
                let off = ((b * qs.heads + h) * qs.len + i) * tkv;
                let q = &s.q[i * qs.dim..(i + 1) * qs.dim];
                row_weights(q, &s.k, qs.dim, tau, mask.row(b, h, i), &mut out[off..off + tkv]);
            }
        }
    }
    Ok(out)
}

/// `softmax(tau * Q K^T) V` with masked entries excluded; rows with no
/// visible key are zero. Always computed in 64-bit and returned head-major.
pub fn naive_attention<T: Element>(batch: &AttentionBatch<T>, mask: &MaskSpec) -> Result<Tensor4<f64>> {
    mask.check(batch)?;
    let qs = batch.q.shape();
    let tau = batch.scale.value();
    let mut data = Vec::with_capacity(qs.numel());
    for b in 0..qs.batch {
        for h in 0..qs.heads {
            let s = slice64(batch, b, h);
            data.extend(slice_output(&s, qs.dim, tau, mask, b, h));
        }
    }
    Ok(Tensor4::from_raw(qs, Layout::HeadMajor, data))
}

/// Central finite differences of `L = <O, dO>` with respect to every entry
/// of `Q`, `K` and `V`, where `O` is [`naive_attention`].
///
/// Only the perturbed `(b, h)` slice is re-evaluated; the loss is separable
/// across slices.
pub fn finite_diff_gradient(
    batch: &AttentionBatch<f64>,
    mask: &MaskSpec,
    d_o: &Tensor4<f64>,
    eps: f64,
) -> Result<crate::Gradients<f64>> {
    mask.check(batch)?;
    if !(1e-6..=1e-3).contains(&eps) {
        bail!(Parameter, "finite-difference step must lie in [1e-6, 1e-3], got {eps}");
    }
    let qs = batch.q.shape();
    let ks = batch.k.shape();
    if d_o.shape() != qs {
        bail!(Shape, "upstream gradient shape {:?} != query shape {qs:?}", d_o.shape());
    }
    let dim = qs.dim;
    let tau = batch.scale.value();
    let mut dq = Tensor4::zeros(qs, Layout::HeadMajor);
    let mut dk = Tensor4::zeros(ks, Layout::HeadMajor);
    let mut dv = Tensor4::zeros(ks, Layout::HeadMajor);

    for b in 0..qs.batch {
        for h in 0..qs.heads {
            let mut s = slice64(batch, b, h);
            let g: Vec<f64> = (0..qs.len)
                .flat_map(|i| (0..dim).map(move |d| (i, d)))
                .map(|(i, d)| d_o.get(b, h, i, d))
                .collect();
            let loss = |s: &Slice64| -> Result<f64> {
                let o = slice_output(s, dim, tau, mask, b, h);
                let l: f64 = o.iter().zip(&g).map(|(x, y)| x * y).sum();
                if !l.is_finite() {
                    bail!(Numeric, "non-finite loss during finite differences");
                }
                Ok(l)
            };
            for which in 0..3 {
                let n = match which {
                    0 => s.q.len(),
                    1 => s.k.len(),
                    _ => s.v.len(),
                };
                for e in 0..n {
                    let x0 = s.component(which)[e];
                    s.component(which)[e] = x0 + eps;
                    let plus = loss(&s)?;
                    s.component(which)[e] = x0 - eps;
                    let minus = loss(&s)?;
                    s.component(which)[e] = x0;
                    let grad = (plus - minus) / (2.0 * eps);
                    let (t, d) = (e / dim, e % dim);
                    match which {
                        0 => dq.set(b, h, t, d, grad),
                        1 => dk.set(b, h, t, d, grad),
                        _ => dv.set(b, h, t, d, grad),
                    }
                }
            }
        }
    }
    Ok(crate::Gradients { dq, dk, dv })
}

/// `max |a - b| / max |b|` over all entries (absolute error when `b == 0`).
pub fn max_rel_err(got: &[f64], want: &[f64]) -> f64 {
    assert_eq!(got.len(), want.len(), "length mismatch");
    let scale = want.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let err = got.iter().zip(want).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    if scale > 0.0 {
        err / scale
    } else {
        err
    }
}

/// [`max_rel_err`] between two tensors after converting to 64-bit and to a
/// common head-major layout.
pub fn tensor_rel_err<A: Element, B: Element>(got: &Tensor4<A>, want: &Tensor4<B>) -> f64 {
    assert_eq!(got.shape(), want.shape(), "shape mismatch");
    let g: Tensor4<f64> = got.to_layout(Layout::HeadMajor).cast();
    let w: Tensor4<f64> = want.to_layout(Layout::HeadMajor).cast();
    max_rel_err(g.data(), w.data())
}
