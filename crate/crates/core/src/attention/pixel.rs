use std::sync::Arc;

use super::window::WindowGrid;
use super::TokenGeometry;
use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamInit};
use crate::tensor::{Real, Tape, Var, GATHER_ZERO};

/// Target width of one attention head.
pub const HEAD_DIM: usize = 32;

/// Number of heads used at `channels`: one per 32 channels, at least one.
pub fn head_count(channels: usize) -> usize {
    (channels / HEAD_DIM).max(1)
}

/// Multi-head self-attention restricted to the tokens of each window, with a
/// learned relative-position bias per head.
#[derive(Clone, Debug)]
pub struct PixelAttention {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    /// `[heads, (2·w_s − 1)²]`
    pub rel_bias: ParamId,
    pub channels: usize,
    pub heads: usize,
    pub window: usize,
}

impl PixelAttention {
    pub fn new(init: &mut ParamInit, channels: usize, window: usize) -> Result<Self> {
        let heads = head_count(channels);
        if channels % heads != 0 {
            return Err(Error::Config(format!(
                "{heads} attention heads do not divide {channels} channels"
            )));
        }
        let span = 2 * window - 1;
        Ok(Self {
            wq: init.weight("wq", channels, channels),
            wk: init.weight("wk", channels, channels),
            wv: init.weight("wv", channels, channels),
            wo: init.weight("wo", channels, channels),
            rel_bias: init.normal("rel_bias", &[heads, span * span], 0.02, false),
            channels,
            heads,
            window,
        })
    }

    pub fn param_count(channels: usize, window: usize) -> usize {
        let span = 2 * window - 1;
        4 * channels * channels + head_count(channels) * span * span
    }

    /// Attention core on layer-normalised tokens `x: [B, L, C]`.
    ///
    /// Pixels are partitioned into windows of the map rolled by `-shift`;
    /// with `shift > 0` pairs straddling a wrapped seam are masked. An extra
    /// token (`geom.extra == 1`, stored after the pixels) joins the single
    /// window and receives no positional bias.
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        x: Var,
        geom: TokenGeometry,
        shift: usize,
    ) -> Result<Var> {
        let TokenGeometry { batch, h, w, extra } = geom;
        let c = self.channels;
        let grid = WindowGrid::new(h, w, self.window)?;
        let nw = grid.n_windows();
        let t = grid.tokens_per_window();
        if extra > 0 && nw != 1 {
            return Err(Error::Config(format!(
                "an extra token needs a single window, grid {h}x{w} has {nw}"
            )));
        }
        let bn = batch * nw;
        let pixels = if extra > 0 {
            tape.slice(x, 1, 0, h * w)?
        } else {
            x
        };
        let mut windows = tape.gather(
            pixels,
            &[bn, t, c],
            Arc::from(grid.partition_map(batch, c, shift)),
        )?;
        if extra > 0 {
            let tok = tape.slice(x, 1, h * w, extra)?;
            windows = tape.concat(&[windows, tok], 1)?;
        }
        let tl = t + extra;

        let q = tape.linear(windows, p.var(self.wq), None)?;
        let k = tape.linear(windows, p.var(self.wk), None)?;
        let v = tape.linear(windows, p.var(self.wv), None)?;
        let (q, k, v) = (
            self.split_heads(tape, q, bn, tl)?,
            self.split_heads(tape, k, bn, tl)?,
            self.split_heads(tape, v, bn, tl)?,
        );
        let d = c / self.heads;
        let logits = tape.bmm(q, k, false, true)?;
        let logits = tape.scale(logits, 1.0 / (d as Real).sqrt())?;
        let logits = tape.reshape(logits, &[batch, nw, self.heads, tl, tl])?;

        let bias_map = self.bias_map(&grid, tl);
        let bias = tape.gather(
            p.var(self.rel_bias),
            &[self.heads, tl, tl],
            Arc::from(bias_map),
        )?;
        let mut logits = tape.add(logits, bias)?;
        if shift > 0 {
            let mask = tape.constant(&[nw, 1, t, t], grid.shift_mask(shift))?;
            logits = tape.add(logits, mask)?;
        }
        let attn = tape.softmax(logits, 4)?;
        let attn = tape.reshape(attn, &[bn * self.heads, tl, tl])?;
        let out = tape.bmm(attn, v, false, false)?;
        let out = self.merge_heads(tape, out, bn, tl)?;
        let out = tape.linear(out, p.var(self.wo), None)?;

        let (pix_out, tok_out) = if extra > 0 {
            (
                tape.slice(out, 1, 0, t)?,
                Some(tape.slice(out, 1, t, extra)?),
            )
        } else {
            (out, None)
        };
        let merged = tape.gather(
            pix_out,
            &[batch, h * w, c],
            Arc::from(grid.merge_map(batch, c, shift)),
        )?;
        match tok_out {
            Some(tok) => Ok(tape.concat(&[merged, tok], 1)?),
            None => Ok(merged),
        }
    }

    fn bias_map(&self, grid: &WindowGrid, tl: usize) -> Vec<usize> {
        let t = grid.tokens_per_window();
        let rel = grid.relative_index();
        let span = 2 * self.window - 1;
        let table = span * span;
        let mut map = Vec::with_capacity(self.heads * tl * tl);
        for hd in 0..self.heads {
            for i in 0..tl {
                for j in 0..tl {
                    map.push(if i < t && j < t {
                        hd * table + rel[i * t + j]
                    } else {
                        GATHER_ZERO
                    });
                }
            }
        }
        map
    }

    fn split_heads(&self, tape: &mut Tape, x: Var, bn: usize, tl: usize) -> Result<Var> {
        let d = self.channels / self.heads;
        if self.heads == 1 {
            return Ok(x);
        }
        let x = tape.reshape(x, &[bn, tl, self.heads, d])?;
        let x = tape.permute(x, &[0, 2, 1, 3])?;
        Ok(tape.reshape(x, &[bn * self.heads, tl, d])?)
    }

    fn merge_heads(&self, tape: &mut Tape, x: Var, bn: usize, tl: usize) -> Result<Var> {
        let d = self.channels / self.heads;
        if self.heads == 1 {
            return Ok(x);
        }
        let x = tape.reshape(x, &[bn, self.heads, tl, d])?;
        let x = tape.permute(x, &[0, 2, 1, 3])?;
        Ok(tape.reshape(x, &[bn, tl, self.channels])?)
    }
}
