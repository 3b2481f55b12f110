//! Window partitioning and the three attention sub-blocks of an MlTr block.

mod block;
mod cross;
mod global;
mod layers;
mod pixel;
pub mod window;

pub use block::{shift_for, CrossWindowBlock, MltrBlock, PixelAttentionBlock};
pub use cross::CrossWindowAttention;
pub use global::GlobalAttention;
pub use layers::{LayerNorm, Mlp, LN_EPS, MLP_RATIO};
pub use pixel::{head_count, PixelAttention, HEAD_DIM};
pub use window::{WindowGrid, MASK_VALUE};

/// Layout of a token sequence `[batch, h*w + extra, C]`: `h*w` pixel tokens
/// in row-major order followed by `extra` non-spatial tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenGeometry {
    pub batch: usize,
    pub h: usize,
    pub w: usize,
    pub extra: usize,
}

impl TokenGeometry {
    pub fn pixels(batch: usize, h: usize, w: usize) -> Self {
        Self {
            batch,
            h,
            w,
            extra: 0,
        }
    }

    pub fn tokens(&self) -> usize {
        self.h * self.w + self.extra
    }
}
