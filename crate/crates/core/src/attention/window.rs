//! Window geometry: partition/merge index maps, cyclic shifts, the seam mask
//! for shifted windows and relative-position indices.
//!
//! Feature maps inside the blocks are channels-last token grids
//! `[batch, h * w, C]` (equivalently `[batch, h, w, C]`), pixels in row-major
//! order. Windows come out as `[batch * n_w, w_s * w_s, C]`, window-major with
//! row-major order inside each window.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Logit added to masked attention pairs; `exp` of it underflows to zero.
pub const MASK_VALUE: Real = -1.0e9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowGrid {
    h: usize,
    w: usize,
    ws: usize,
}

impl WindowGrid {
    pub fn new(h: usize, w: usize, ws: usize) -> Result<Self> {
        if ws == 0 || h == 0 || w == 0 || h % ws != 0 || w % ws != 0 {
            return Err(Error::Config(format!(
                "window size {ws} must divide feature extents h={h}, w={w}"
            )));
        }
        Ok(Self { h, w, ws })
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn window_size(&self) -> usize {
        self.ws
    }

    pub fn windows_per_row(&self) -> usize {
        self.w / self.ws
    }

    pub fn n_windows(&self) -> usize {
        (self.h / self.ws) * (self.w / self.ws)
    }

    pub fn tokens_per_window(&self) -> usize {
        self.ws * self.ws
    }

    /// Window index and in-window position of pixel `(row, col)`.
    pub fn locate(&self, row: usize, col: usize) -> (usize, usize) {
        let win = (row / self.ws) * self.windows_per_row() + col / self.ws;
        let pos = (row % self.ws) * self.ws + col % self.ws;
        (win, pos)
    }

    /// Pixel `(row, col)` at position `pos` of window `win`.
    pub fn pixel(&self, win: usize, pos: usize) -> (usize, usize) {
        let (wr, wc) = (win / self.windows_per_row(), win % self.windows_per_row());
        (wr * self.ws + pos / self.ws, wc * self.ws + pos % self.ws)
    }

    fn wrap(v: usize, shift: isize, n: usize) -> usize {
        (v as isize + shift).rem_euclid(n as isize) as usize
    }

    /// Gather map from `[B, h*w, C]` to windows `[B*n_w, T, C]` of the map
    /// rolled by `-shift` along both axes (`shift == 0` is a plain partition).
    pub fn partition_map(&self, batch: usize, channels: usize, shift: usize) -> Vec<usize> {
        let (nw, t) = (self.n_windows(), self.tokens_per_window());
        let mut map = Vec::with_capacity(batch * nw * t * channels);
        for b in 0..batch {
            for win in 0..nw {
                for pos in 0..t {
                    let (r, c) = self.pixel(win, pos);
                    let sr = Self::wrap(r, shift as isize, self.h);
                    let sc = Self::wrap(c, shift as isize, self.w);
                    let base = ((b * self.h + sr) * self.w + sc) * channels;
                    map.extend(base..base + channels);
                }
            }
        }
        map
    }

    /// Inverse of [`partition_map`](Self::partition_map) for the same shift.
    pub fn merge_map(&self, batch: usize, channels: usize, shift: usize) -> Vec<usize> {
        let (nw, t) = (self.n_windows(), self.tokens_per_window());
        let mut map = Vec::with_capacity(batch * self.h * self.w * channels);
        for b in 0..batch {
            for r in 0..self.h {
                for c in 0..self.w {
                    let sr = Self::wrap(r, -(shift as isize), self.h);
                    let sc = Self::wrap(c, -(shift as isize), self.w);
                    let (win, pos) = self.locate(sr, sc);
                    let base = ((b * nw + win) * t + pos) * channels;
                    map.extend(base..base + channels);
                }
            }
        }
        map
    }

    /// Gather map rolling a `[B, h, w, C]` map by `offset` along both spatial
    /// axes: `out[r][c] = x[(r - offset) mod h][(c - offset) mod w]`.
    pub fn roll_map(&self, batch: usize, channels: usize, offset: isize) -> Vec<usize> {
        let mut map = Vec::with_capacity(batch * self.h * self.w * channels);
        for b in 0..batch {
            for r in 0..self.h {
                for c in 0..self.w {
                    let sr = Self::wrap(r, -offset, self.h);
                    let sc = Self::wrap(c, -offset, self.w);
                    let base = ((b * self.h + sr) * self.w + sc) * channels;
                    map.extend(base..base + channels);
                }
            }
        }
        map
    }

    /// Additive attention mask `[n_w, T, T]` for windows of a map rolled by
    /// `-shift`: token pairs that were not neighbours before the roll (they
    /// straddle a wrapped seam) get [`MASK_VALUE`], all others zero.
    pub fn shift_mask(&self, shift: usize) -> Vec<Real> {
        let (nw, t) = (self.n_windows(), self.tokens_per_window());
        let region = |v: usize, n: usize| -> usize {
            if v < n - self.ws {
                0
            } else if v < n - shift {
                1
            } else {
                2
            }
        };
        let mut mask = vec![0.0; nw * t * t];
        for win in 0..nw {
            let labels: Vec<usize> = (0..t)
                .map(|pos| {
                    let (r, c) = self.pixel(win, pos);
                    region(r, self.h) * 3 + region(c, self.w)
                })
                .collect();
            for i in 0..t {
                for j in 0..t {
                    if labels[i] != labels[j] {
                        mask[(win * t + i) * t + j] = MASK_VALUE;
                    }
                }
            }
        }
        mask
    }

    /// For each in-window pair `(i, j)`, the index of `(Δrow, Δcol)` in a
    /// `(2·w_s − 1)²` relative-position table.
    pub fn relative_index(&self) -> Vec<usize> {
        let ws = self.ws;
        let t = ws * ws;
        let span = 2 * ws - 1;
        let mut idx = Vec::with_capacity(t * t);
        for i in 0..t {
            for j in 0..t {
                let dr = (i / ws) as isize - (j / ws) as isize + ws as isize - 1;
                let dc = (i % ws) as isize - (j % ws) as isize + ws as isize - 1;
                idx.push(dr as usize * span + dc as usize);
            }
        }
        idx
    }
}

fn map_dims(x: &Tensor) -> Result<(usize, usize, usize, usize)> {
    match *x.shape() {
        [b, h, w, c] => Ok((b, h, w, c)),
        _ => Err(Error::Config(format!(
            "expected a [batch, h, w, C] map, got {:?}",
            x.shape()
        ))),
    }
}

/// Splits a `[B, h, w, C]` map into `[B * n_w, w_s², C]` windows.
pub fn window_partition(x: &Tensor, ws: usize) -> Result<Tensor> {
    let (b, h, w, c) = map_dims(x)?;
    let grid = WindowGrid::new(h, w, ws)?;
    let shape = [b * grid.n_windows(), grid.tokens_per_window(), c];
    Ok(x.gather(&shape, &grid.partition_map(b, c, 0))?)
}

/// Reassembles windows from [`window_partition`] into a `[B, h, w, C]` map.
pub fn window_merge(
    windows: &Tensor,
    batch: usize,
    h: usize,
    w: usize,
    ws: usize,
) -> Result<Tensor> {
    let grid = WindowGrid::new(h, w, ws)?;
    let c = *windows.shape().last().unwrap_or(&0);
    let expected = [batch * grid.n_windows(), grid.tokens_per_window(), c];
    if windows.shape() != expected {
        return Err(Error::Config(format!(
            "window tensor {:?} does not match grid {expected:?}",
            windows.shape()
        )));
    }
    Ok(windows.gather(&[batch, h, w, c], &grid.merge_map(batch, c, 0))?)
}

/// Toroidal roll of a `[B, h, w, C]` map by `(offset, offset)`.
pub fn cyclic_shift(x: &Tensor, offset: isize) -> Result<Tensor> {
    let (b, h, w, c) = map_dims(x)?;
    if offset.unsigned_abs() >= h.min(w) && offset != 0 {
        return Err(Error::Config(format!(
            "shift offset {offset} must be smaller than min(h, w) = {}",
            h.min(w)
        )));
    }
    let grid = WindowGrid::new(h, w, 1)?;
    Ok(x.gather(x.shape(), &grid.roll_map(b, c, offset))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp(shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|i| i as Real).collect()).unwrap()
    }

    #[test]
    fn four_by_four_partition_enumerates_windows() {
        // one channel: value == flat pixel index
        let x = ramp(&[1, 4, 4, 1]);
        let wins = window_partition(&x, 2).unwrap();
        assert_eq!(wins.shape(), &[4, 4, 1]);
        // window 0 holds pixels (0,0),(0,1),(1,0),(1,1)
        assert_eq!(&wins.data()[..4], &[0., 1., 4., 5.]);
        assert_eq!(&wins.data()[4..8], &[2., 3., 6., 7.]);
        assert_eq!(&wins.data()[12..16], &[10., 11., 14., 15.]);
    }

    #[test]
    fn single_window_keeps_row_major_order() {
        let x = ramp(&[1, 3, 3, 2]);
        let wins = window_partition(&x, 3).unwrap();
        assert_eq!(wins.shape(), &[1, 9, 2]);
        assert_eq!(wins.data(), x.data());
    }

    #[test]
    fn non_divisible_extent_is_rejected() {
        let err = WindowGrid::new(6, 4, 4).unwrap_err().to_string();
        assert!(err.contains("h=6") && err.contains("w=4") && err.contains('4'));
    }

    #[test]
    fn roll_two_by_two() {
        // [[a,b],[c,d]] -> [[d,c],[b,a]]
        let x = Tensor::new(&[1, 2, 2, 1], vec![1., 2., 3., 4.]).unwrap();
        let y = cyclic_shift(&x, 1).unwrap();
        assert_eq!(y.data(), &[4., 3., 2., 1.]);
        assert_eq!(cyclic_shift(&x, 0).unwrap(), x);
    }

    #[test]
    fn relative_table_size_and_symmetry() {
        let g = WindowGrid::new(4, 4, 2).unwrap();
        let idx = g.relative_index();
        assert_eq!(idx.len(), 16);
        assert!(idx.iter().all(|&i| i < 9));
        // diagonal is the zero offset, the table centre
        for i in 0..4 {
            assert_eq!(idx[i * 4 + i], 4);
        }
    }

    #[test]
    fn shift_mask_only_separates_wrapped_regions() {
        let g = WindowGrid::new(4, 4, 2).unwrap();
        let mask = g.shift_mask(1);
        let t = 4;
        // window 0 lies fully inside region (0, 0): nothing masked
        assert!(mask[..t * t].iter().all(|&m| m == 0.0));
        // last window mixes all four regions: every off-diagonal pair is masked
        let last = &mask[3 * t * t..];
        for i in 0..t {
            for j in 0..t {
                assert_eq!(last[i * t + j] == 0.0, i == j);
            }
        }
    }

    #[test]
    fn shifted_partition_matches_roll_then_partition() {
        let x = ramp(&[2, 4, 6, 3]);
        let g = WindowGrid::new(4, 6, 2).unwrap();
        let direct = x.gather(&[2 * 6, 4, 3], &g.partition_map(2, 3, 1)).unwrap();
        let rolled = cyclic_shift(&x, -1).unwrap();
        assert_eq!(direct, window_partition(&rolled, 2).unwrap());
    }

    proptest! {
        #[test]
        fn partition_merge_roundtrip(
            b in 1usize..3, hw in 1usize..4, ww in 1usize..4, ws in 1usize..4, c in 1usize..4,
            shift in 0usize..3,
            seed in any::<u64>(),
        ) {
            let (h, w) = (hw * ws, ww * ws);
            let n = b * h * w * c;
            let data: Vec<Real> = (0..n).map(|i| ((i as u64).wrapping_mul(seed | 1) % 1000) as Real / 7.0).collect();
            let x = Tensor::new(&[b, h, w, c], data).unwrap();
            let wins = window_partition(&x, ws).unwrap();
            prop_assert_eq!(&window_merge(&wins, b, h, w, ws).unwrap(), &x);

            let g = WindowGrid::new(h, w, ws).unwrap();
            let s = shift.min(ws.saturating_sub(1));
            let shape = [b * g.n_windows(), g.tokens_per_window(), c];
            let fwd = x.gather(&shape, &g.partition_map(b, c, s)).unwrap();
            let back = fwd.gather(x.shape(), &g.merge_map(b, c, s)).unwrap();
            prop_assert_eq!(&back, &x);

            let off = (shift % h.min(w)) as isize;
            let rolled = cyclic_shift(&x, off).unwrap();
            prop_assert_eq!(&cyclic_shift(&rolled, -off).unwrap(), &x);
        }
    }
}
