use std::sync::Arc;

use super::window::WindowGrid;
use crate::error::Result;
use crate::params::{Bound, ParamId, ParamInit};
use crate::tensor::{Real, Tape, Var};

/// Attention among windows, run separately on every channel.
///
/// Each window of one channel unfolds into a token of length `w_s²`; the
/// `n_w` tokens of a channel attend to each other with a single head. The
/// four `w_s² × w_s²` projections are shared by all channels, so the
/// parameter count is `4·w_s⁴` whatever the channel width.
#[derive(Clone, Debug)]
pub struct CrossWindowAttention {
    pub uq: ParamId,
    pub uk: ParamId,
    pub uv: ParamId,
    pub uo: ParamId,
    pub window: usize,
}

impl CrossWindowAttention {
    pub fn new(init: &mut ParamInit, window: usize) -> Self {
        let t = window * window;
        Self {
            uq: init.weight("uq", t, t),
            uk: init.weight("uk", t, t),
            uv: init.weight("uv", t, t),
            uo: init.weight("uo", t, t),
            window,
        }
    }

    pub fn param_count(window: usize) -> usize {
        4 * window.pow(4)
    }

    /// Gather map from `[B, h*w, C]` to per-channel window tokens `[B*C, n_w, T]`.
    pub fn unfold_map(grid: &WindowGrid, batch: usize, channels: usize) -> Vec<usize> {
        let (nw, t) = (grid.n_windows(), grid.tokens_per_window());
        let (h, w) = (grid.height(), grid.width());
        let mut map = Vec::with_capacity(batch * channels * nw * t);
        for b in 0..batch {
            for c in 0..channels {
                for win in 0..nw {
                    for pos in 0..t {
                        let (r, col) = grid.pixel(win, pos);
                        map.push(((b * h + r) * w + col) * channels + c);
                    }
                }
            }
        }
        map
    }

    /// Inverse of [`unfold_map`](Self::unfold_map).
    pub fn fold_map(grid: &WindowGrid, batch: usize, channels: usize) -> Vec<usize> {
        let (nw, t) = (grid.n_windows(), grid.tokens_per_window());
        let (h, w) = (grid.height(), grid.width());
        let mut map = Vec::with_capacity(batch * h * w * channels);
        for b in 0..batch {
            for r in 0..h {
                for col in 0..w {
                    let (win, pos) = grid.locate(r, col);
                    for c in 0..channels {
                        map.push(((b * channels + c) * nw + win) * t + pos);
                    }
                }
            }
        }
        map
    }

    /// Attention core on layer-normalised pixel tokens `x: [B, h*w, C]`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        x: Var,
        batch: usize,
        h: usize,
        w: usize,
    ) -> Result<Var> {
        let channels = *tape.shape(x).last().expect("rank 3");
        let grid = WindowGrid::new(h, w, self.window)?;
        let (nw, t) = (grid.n_windows(), grid.tokens_per_window());
        let tokens = tape.gather(
            x,
            &[batch * channels, nw, t],
            Arc::from(Self::unfold_map(&grid, batch, channels)),
        )?;
        let q = tape.linear(tokens, p.var(self.uq), None)?;
        let k = tape.linear(tokens, p.var(self.uk), None)?;
        let v = tape.linear(tokens, p.var(self.uv), None)?;
        let logits = tape.bmm(q, k, false, true)?;
        let logits = tape.scale(logits, 1.0 / (t as Real).sqrt())?;
        let attn = tape.softmax(logits, 2)?;
        let out = tape.bmm(attn, v, false, false)?;
        let out = tape.linear(out, p.var(self.uo), None)?;
        Ok(tape.gather(
            out,
            &[batch, h * w, channels],
            Arc::from(Self::fold_map(&grid, batch, channels)),
        )?)
    }
}
