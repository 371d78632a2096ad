//! Seeded random generation of tensors, keep masks and bucket ids.
//!
//! Every `(batch, head)` slice draws from its own ChaCha8 stream, selected by
//! the stream counter rather than by advancing a shared generator. Slices can
//! therefore be generated in any order, by any number of workers, and always
//! produce the same values for a given seed.

use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as _, StandardNormal};

use crate::error::{bail, Result};
use crate::tensor::{Grid3, Layout, Shape4, Tensor4};
use crate::Element;

/// Independent stream families. Keeps e.g. the LSH projections of a slice
/// uncorrelated with the tensor values of the same slice.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Domain {
    Tensor = 1,
    Projection = 2,
    Keep = 3,
    Buckets = 4,
    Upstream = 5,
}

/// Generator for one `(domain, slice)` stream of `seed`.
pub fn stream(seed: u64, domain: Domain, slice: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((domain as u64) << 48) | slice as u64);
    rng
}

/// Value distribution for [`random_tensor`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Distribution {
    StandardNormal,
    Normal { mean: f64, std: f64 },
}

impl Distribution {
    fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        let z: f64 = StandardNormal.sample(rng);
        match *self {
            Distribution::StandardNormal => z,
            Distribution::Normal { mean, std } => mean + std * z,
        }
    }
}

/// Deterministic random tensor in the requested layout.
pub fn random_tensor<T: Element>(shape: Shape4, layout: Layout, seed: u64, dist: Distribution) -> Result<Tensor4<T>> {
    let shape = Shape4::new(shape.batch, shape.heads, shape.len, shape.dim)?;
    if let Distribution::Normal { mean, std } = dist {
        if !(mean.is_finite() && std.is_finite() && std >= 0.0) {
            bail!(Parameter, "normal distribution needs finite mean and std >= 0");
        }
    }
    let mut out = Tensor4::zeros(shape, layout);
    for b in 0..shape.batch {
        for h in 0..shape.heads {
            let mut rng = stream(seed, Domain::Tensor, b * shape.heads + h);
            for t in 0..shape.len {
                for d in 0..shape.dim {
                    out.set(b, h, t, d, T::from_f64(dist.sample(&mut rng)));
                }
            }
        }
    }
    Ok(out)
}

/// Keep flags `(B, T, H)`: each `(position, head)` is dropped independently
/// with probability `drop_prob`.
pub fn random_keep_mask(batch: usize, len: usize, heads: usize, drop_prob: f64, seed: u64) -> Result<Grid3<bool>> {
    if !(0.0..=1.0).contains(&drop_prob) {
        bail!(Parameter, "drop probability must lie in [0, 1], got {drop_prob}");
    }
    let mut keep = Grid3::filled(batch, heads, len, Layout::SeqMajor, true);
    for b in 0..batch {
        for h in 0..heads {
            let mut rng = stream(seed, Domain::Keep, b * heads + h);
            for t in 0..len {
                let u: f64 = rng.random();
                keep.set(b, h, t, u >= drop_prob);
            }
        }
    }
    Ok(keep)
}

/// Bucket ids `(B, T, H)` drawn uniformly from `[0, nb)`.
pub fn uniform_buckets(batch: usize, len: usize, heads: usize, nb: u32, seed: u64) -> Result<Grid3<u32>> {
    if nb == 0 {
        bail!(Parameter, "bucket count must be >= 1");
    }
    let mut out = Grid3::filled(batch, heads, len, Layout::SeqMajor, 0u32);
    for b in 0..batch {
        for h in 0..heads {
            let mut rng = stream(seed, Domain::Buckets, b * heads + h);
            for t in 0..len {
                out.set(b, h, t, rng.random_range(0..nb));
            }
        }
    }
    Ok(out)
}

/// `n` standard-normal draws from one stream.
pub(crate) fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}
