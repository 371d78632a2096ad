//! Plain causal tiled attention: the baseline every sparse kernel is
//! measured against.
//!
//! Query block `i` visits key blocks `[0, j_stop)` where `j_stop` is the
//! number of key blocks starting at or before the block's last query. With
//! equal block sizes that is the triangle `j <= i`: off-diagonal tiles are
//! fully visible and only the diagonal tile carries a causal mask.

use crate::error::{bail, Result};
use crate::kernel::{self, identity_index, Indexing};
use crate::tensor::{AttentionBatch, BlockSpec, Tensor4};
use crate::{Element, FlashOutputs, Gradients};

pub use crate::schedule::dense_tile_count;

fn check_square<T: Element>(batch: &AttentionBatch<T>) -> Result<()> {
    if batch.len_q() != batch.len_kv() {
        bail!(
            Shape,
            "causal attention needs T_Q == T_KV, got {} and {}",
            batch.len_q(),
            batch.len_kv()
        );
    }
    Ok(())
}

/// Causal forward pass over head-major operands.
pub fn flash_forward<T: Element>(batch: &AttentionBatch<T>, blocks: BlockSpec) -> Result<FlashOutputs<T>> {
    check_square(batch)?;
    let s = batch.q.shape();
    let idx = identity_index(s.batch, s.heads, s.len);
    kernel::forward(batch, &Indexing::causal(&idx, &idx), blocks)
}

/// Causal backward pass; `outputs` must come from [`flash_forward`] on the
/// same batch and block sizes.
pub fn flash_backward<T: Element>(
    batch: &AttentionBatch<T>,
    outputs: &FlashOutputs<T>,
    d_o: &Tensor4<T>,
    blocks: BlockSpec,
) -> Result<Gradients<T>> {
    check_square(batch)?;
    let s = batch.q.shape();
    let idx = identity_index(s.batch, s.heads, s.len);
    kernel::backward(batch, &Indexing::causal(&idx, &idx), outputs, d_o, blocks)
}
