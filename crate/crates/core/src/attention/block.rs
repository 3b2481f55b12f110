use super::cross::CrossWindowAttention;
use super::layers::{LayerNorm, Mlp, MLP_RATIO};
use super::pixel::PixelAttention;
use super::TokenGeometry;
use crate::error::Result;
use crate::params::{Bound, ParamInit};
use crate::tensor::{Tape, Var};

/// Shift used by the second pixel-attention sub-block. A grid that fits in
/// one window along either axis is not shifted.
pub fn shift_for(h: usize, w: usize, window: usize) -> usize {
    if h.min(w) <= window {
        0
    } else {
        window / 2
    }
}

/// Pre-norm residual sub-block around pixel attention:
/// `t = PA(LN(x)) + x; y = MLP(LN(t)) + t`.
#[derive(Clone, Debug)]
pub struct PixelAttentionBlock {
    pub norm1: LayerNorm,
    pub attn: PixelAttention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
    pub shift: usize,
}

impl PixelAttentionBlock {
    pub fn new(init: &mut ParamInit, channels: usize, window: usize, shift: usize) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(&mut init.scope("norm1"), channels),
            attn: PixelAttention::new(&mut init.scope("attn"), channels, window)?,
            norm2: LayerNorm::new(&mut init.scope("norm2"), channels),
            mlp: Mlp::new(
                &mut init.scope("mlp"),
                channels,
                MLP_RATIO * channels,
                channels,
            ),
            shift,
        })
    }

    pub fn param_count(channels: usize, window: usize) -> usize {
        4 * channels + PixelAttention::param_count(channels, window) + mlp_params(channels)
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var, geom: TokenGeometry) -> Result<Var> {
        let n = self.norm1.forward(tape, p, x)?;
        let a = self.attn.forward(tape, p, n, geom, self.shift)?;
        let t = tape.add(a, x)?;
        let n = self.norm2.forward(tape, p, t)?;
        let m = self.mlp.forward(tape, p, n)?;
        Ok(tape.add(m, t)?)
    }
}

/// Pre-norm residual sub-block around cross-window attention. An extra token
/// passes through unchanged.
#[derive(Clone, Debug)]
pub struct CrossWindowBlock {
    pub norm1: LayerNorm,
    pub attn: CrossWindowAttention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
}

impl CrossWindowBlock {
    pub fn new(init: &mut ParamInit, channels: usize, window: usize) -> Self {
        Self {
            norm1: LayerNorm::new(&mut init.scope("norm1"), channels),
            attn: CrossWindowAttention::new(&mut init.scope("attn"), window),
            norm2: LayerNorm::new(&mut init.scope("norm2"), channels),
            mlp: Mlp::new(
                &mut init.scope("mlp"),
                channels,
                MLP_RATIO * channels,
                channels,
            ),
        }
    }

    pub fn param_count(channels: usize, window: usize) -> usize {
        4 * channels + CrossWindowAttention::param_count(window) + mlp_params(channels)
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var, geom: TokenGeometry) -> Result<Var> {
        let TokenGeometry { batch, h, w, extra } = geom;
        let pixels = if extra > 0 {
            tape.slice(x, 1, 0, h * w)?
        } else {
            x
        };
        let n = self.norm1.forward(tape, p, pixels)?;
        let a = self.attn.forward(tape, p, n, batch, h, w)?;
        let t = tape.add(a, pixels)?;
        let n = self.norm2.forward(tape, p, t)?;
        let m = self.mlp.forward(tape, p, n)?;
        let y = tape.add(m, t)?;
        if extra > 0 {
            let tok = tape.slice(x, 1, h * w, extra)?;
            Ok(tape.concat(&[y, tok], 1)?)
        } else {
            Ok(y)
        }
    }
}

/// One MlTr block: regular pixel attention, shifted pixel attention, then
/// cross-window attention.
#[derive(Clone, Debug)]
pub struct MltrBlock {
    pub pixel: PixelAttentionBlock,
    pub pixel_shifted: PixelAttentionBlock,
    pub cross: CrossWindowBlock,
}

impl MltrBlock {
    pub fn new(
        init: &mut ParamInit,
        channels: usize,
        window: usize,
        h: usize,
        w: usize,
    ) -> Result<Self> {
        Ok(Self {
            pixel: PixelAttentionBlock::new(&mut init.scope("pa"), channels, window, 0)?,
            pixel_shifted: PixelAttentionBlock::new(
                &mut init.scope("pa_shifted"),
                channels,
                window,
                shift_for(h, w, window),
            )?,
            cross: CrossWindowBlock::new(&mut init.scope("cwa"), channels, window),
        })
    }

    pub fn param_count(channels: usize, window: usize) -> usize {
        2 * PixelAttentionBlock::param_count(channels, window)
            + CrossWindowBlock::param_count(channels, window)
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var, geom: TokenGeometry) -> Result<Var> {
        let x = self.pixel.forward(tape, p, x, geom)?;
        let x = self.pixel_shifted.forward(tape, p, x, geom)?;
        self.cross.forward(tape, p, x, geom)
    }
}

fn mlp_params(c: usize) -> usize {
    let hidden = MLP_RATIO * c;
    c * hidden + hidden + hidden * c + c
}
