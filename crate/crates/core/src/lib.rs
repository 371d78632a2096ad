//! Exact tiled causal attention with dynamic sparsity.
//!
//! The crate implements three tiled kernels that share one online-softmax
//! engine:
//!
//! * [`dense`]: plain causal attention with the triangular tile rule.
//! * [`qk`]: per-head query/key dropping. Kept rows are compacted and the
//!   kernel skips tiles using the original positions of the compacted rows.
//! * [`hash`]: attention restricted to same-bucket causal pairs after a
//!   stable sort by bucket id, computed over a banded tile range.
//!
//! [`reformer`] provides the fixed-chunk LSH baseline and the collision
//! coverage metric, and [`oracle`] the naive masked attention every kernel
//! is tested against.
//!
//! The crate is `no_std` (with `alloc`) when built without the default
//! features. The `parallel` feature spreads work over `(batch, head)` slices
//! with rayon; every output region has a single owner, so results are
//! bitwise identical at any worker count.
#![cfg_attr(not(feature = "std"), no_std)]
#![forbid(unsafe_code)]

extern crate alloc;

mod element;
mod error;
mod par;

pub mod dense;
pub mod hash;
pub mod kernel;
pub mod oracle;
pub mod qk;
pub mod reformer;
pub mod rng;
pub mod schedule;
pub mod softmax;
pub mod tensor;

pub use element::{Element, Precision};
pub use error::{Error, Result};
pub use kernel::{FlashOutputs, Gradients};
pub use schedule::TileRange;
pub use tensor::{AttentionBatch, BlockSpec, Grid3, Layout, Scale, Shape4, Tensor4};
