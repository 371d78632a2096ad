//! Streaming softmax accumulation over key blocks.
//!
//! One [`SoftmaxState`] holds the running row maximum `m`, the running
//! denominator `l` and the running *normalized* output `o` for a block of
//! queries. Each call to [`SoftmaxState::update`] folds in one tile of masked
//! logits (masked entries are exactly `-inf`) and the matching value block.
//!
//! Rows that have seen no visible key keep `m = -inf`, `l = 0` and `o = 0`:
//! the running maximum is replaced by `0` before exponentiating and an
//! infinite reciprocal of the denominator is replaced by `1`, so no NaN is
//! ever produced.

use alloc::vec::Vec;

use crate::error::{bail, Result};
use crate::Element;

#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxState<T> {
    rows: usize,
    dim: usize,
    m: Vec<T>,
    l: Vec<T>,
    o: Vec<T>,
    scratch: Vec<T>,
}

impl<T: Element> SoftmaxState<T> {
    pub fn new(rows: usize, dim: usize) -> Result<Self> {
        if rows == 0 || dim == 0 {
            bail!(Parameter, "softmax state needs rows >= 1 and dim >= 1");
        }
        Ok(Self::init(rows, dim))
    }

    pub(crate) fn init(rows: usize, dim: usize) -> Self {
        Self {
            rows,
            dim,
            m: alloc::vec![T::neg_infinity(); rows],
            l: alloc::vec![T::zero(); rows],
            o: alloc::vec![T::zero(); rows * dim],
            scratch: Vec::new(),
        }
    }

    /// Restores the initial statistics, keeping allocations.
    pub fn reset(&mut self, rows: usize) {
        self.rows = rows;
        self.m.clear();
        self.m.resize(rows, T::neg_infinity());
        self.l.clear();
        self.l.resize(rows, T::zero());
        self.o.clear();
        self.o.resize(rows * self.dim, T::zero());
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Running maxima; `-inf` for rows without a visible key so far.
    pub fn max(&self) -> &[T] {
        &self.m
    }

    /// Running denominators, relative to `max` (with `-inf` read as `0`).
    pub fn denom(&self) -> &[T] {
        &self.l
    }

    /// Normalized output rows, `rows x dim`.
    pub fn output(&self) -> &[T] {
        &self.o
    }

    /// Folds one tile of logits (`rows x cols`, row-major) and the matching
    /// value block (`cols x dim`) into the statistics.
    ///
    /// Logits must be finite or exactly `-inf`; anything else (NaN, `+inf`
    /// from an overflowing dot product) is a numeric error and leaves the
    /// state untouched.
    pub fn update(&mut self, qk: &[T], cols: usize, v: &[T]) -> Result<()> {
        if qk.len() != self.rows * cols || v.len() != cols * self.dim {
            bail!(
                Shape,
                "tile of {} logits / {} values does not match {} rows x {} cols x {} dim",
                qk.len(),
                v.len(),
                self.rows,
                cols,
                self.dim
            );
        }
        if let Some(pos) = qk.iter().position(|&x| x.is_nan() || x == T::infinity()) {
            bail!(Numeric, "logit tile entry {pos} is not finite or -inf");
        }
        self.update_unchecked(qk, cols, v);
        Ok(())
    }

    pub(crate) fn update_unchecked(&mut self, qk: &[T], cols: usize, v: &[T]) {
        let dim = self.dim;
        let ninf = T::neg_infinity();
        self.scratch.resize(cols, T::zero());
        let p = &mut self.scratch[..cols];
        for r in 0..self.rows {
            let row = &qk[r * cols..(r + 1) * cols];
            let row_max = row.iter().fold(ninf, |acc, &x| if x > acc { x } else { acc });
            let m_old = self.m[r];
            let m_new = if row_max > m_old { row_max } else { m_old };
            let m_hat = if m_new == ninf { T::zero() } else { m_new };

            let mut l_tile = T::zero();
            for (pc, &x) in p.iter_mut().zip(row) {
                *pc = (x - m_hat).exp();
                l_tile = l_tile + *pc;
            }
            // exp(-inf - m_hat) = 0 covers the first visible block.
            let alpha = (m_old - m_hat).exp();
            let l_old = self.l[r];
            let l_new = alpha * l_old + l_tile;
            let mut z = T::one() / l_new;
            if z == T::infinity() {
                z = T::one();
            }

            let o_row = &mut self.o[r * dim..(r + 1) * dim];
            let carry = alpha * l_old * z;
            for x in o_row.iter_mut() {
                *x = *x * carry;
            }
            for (c, &pc) in p.iter().enumerate() {
                let w = pc * z;
                if w != T::zero() {
                    let v_row = &v[c * dim..(c + 1) * dim];
                    for (x, &vv) in o_row.iter_mut().zip(v_row) {
                        *x = *x + w * vv;
                    }
                }
            }
            self.m[r] = m_new;
            self.l[r] = l_new;
        }
    }
}
