//! Closed-form FLOP and parameter counts of the attention cores, plus a
//! measured counterpart obtained by running the real modules.
//!
//! One multiply-add counts as one FLOP. Only the four projections and the
//! two attention products are counted.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::attention::{
    head_count, CrossWindowAttention, GlobalAttention, PixelAttention, TokenGeometry, WindowGrid,
};
use crate::error::{Error, Result};
use crate::params::{ParamInit, ParamStore};
use crate::tensor::{count_flops, Real, Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub enum AttentionMode {
    #[serde(rename = "GA")]
    Global,
    #[serde(rename = "PA")]
    Pixel,
    #[serde(rename = "CWA")]
    CrossWindow,
}

impl AttentionMode {
    pub const ALL: [AttentionMode; 3] = [Self::Global, Self::Pixel, Self::CrossWindow];

    pub fn label(self) -> &'static str {
        match self {
            Self::Global => "GA",
            Self::Pixel => "PA",
            Self::CrossWindow => "CWA",
        }
    }
}

impl fmt::Display for AttentionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for AttentionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ga" | "global" => Ok(Self::Global),
            "pa" | "pixel" => Ok(Self::Pixel),
            "cwa" | "cross" | "cross-window" => Ok(Self::CrossWindow),
            _ => Err(Error::Config(format!(
                "unknown attention mode `{s}` (expected ga, pa or cwa)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CostReport {
    pub mode: AttentionMode,
    pub h: usize,
    pub w: usize,
    pub channels: usize,
    pub window: usize,
    pub flops: u64,
    /// Exact parameter count of the attention core.
    pub params: u64,
    pub params_note: &'static str,
}

/// FLOPs of one attention core on an `h×w×C` map.
pub fn flops_analytical(
    mode: AttentionMode,
    h: usize,
    w: usize,
    channels: usize,
    window: usize,
) -> Result<CostReport> {
    let (hw, c, ws) = (h as u64 * w as u64, channels as u64, window as u64);
    if mode != AttentionMode::Global {
        WindowGrid::new(h, w, window)?;
    }
    let (flops, params, params_note) = match mode {
        AttentionMode::Global => (
            4 * hw * c * c + 2 * hw * hw * c,
            4 * c * c,
            "proportional to C^2",
        ),
        AttentionMode::Pixel => {
            let span = 2 * ws - 1;
            (
                4 * hw * c * c + 2 * ws * ws * hw * c,
                4 * c * c + head_count(channels) as u64 * span * span,
                "proportional to C^2",
            )
        }
        AttentionMode::CrossWindow => {
            let nw = hw / (ws * ws);
            (
                4 * hw * ws * ws * c + 2 * nw * nw * ws * ws * c,
                4 * ws.pow(4),
                "proportional to w_s^4, independent of C",
            )
        }
    };
    Ok(CostReport {
        mode,
        h,
        w,
        channels,
        window,
        flops,
        params,
        params_note,
    })
}

/// Runs the attention core once on a random `[1, h·w, C]` input and returns
/// the number of multiply-adds it performed.
pub fn flops_measured(
    mode: AttentionMode,
    h: usize,
    w: usize,
    channels: usize,
    window: usize,
) -> Result<u64> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let data: Vec<Real> = (0..h * w * channels)
        .map(|_| rng.random::<Real>() - 0.5)
        .collect();
    let x = Tensor::new(&[1, h * w, channels], data)?;
    let mut init = ParamInit::new(&mut store, &mut rng);
    enum Core {
        G(GlobalAttention),
        P(PixelAttention),
        C(CrossWindowAttention),
    }
    let core = match mode {
        AttentionMode::Global => Core::G(GlobalAttention::new(&mut init, channels)),
        AttentionMode::Pixel => Core::P(PixelAttention::new(&mut init, channels, window)?),
        AttentionMode::CrossWindow => Core::C(CrossWindowAttention::new(&mut init, window)),
    };
    let mut tape = Tape::new();
    let p = store.bind(&mut tape, false)?;
    let xv = tape.constant(x.shape(), x.data().to_vec())?;
    let (res, flops) = count_flops(|| -> Result<()> {
        match &core {
            Core::G(m) => {
                m.forward(&mut tape, &p, xv)?;
            }
            Core::P(m) => {
                m.forward(&mut tape, &p, xv, TokenGeometry::pixels(1, h, w), 0)?;
            }
            Core::C(m) => {
                m.forward(&mut tape, &p, xv, 1, h, w)?;
            }
        }
        Ok(())
    });
    res?;
    Ok(flops)
}

/// Degree of the lowest-order polynomial through `(xs, ys)`, found from
/// divided differences: the highest order whose difference is not
/// negligible relative to the data.
pub fn polynomial_degree(xs: &[f64], ys: &[f64]) -> usize {
    assert_eq!(xs.len(), ys.len());
    let scale = ys.iter().fold(0.0f64, |m, y| m.max(y.abs())).max(1.0);
    let mut table = ys.to_vec();
    let mut degree = 0;
    for order in 1..xs.len() {
        table = (0..table.len() - 1)
            .map(|i| (table[i + 1] - table[i]) / (xs[i + order] - xs[i]))
            .collect();
        let span = xs[xs.len() - 1] - xs[0];
        if table
            .iter()
            .any(|d| (d * span.powi(order as i32)).abs() > 1e-9 * scale)
        {
            degree = order;
        }
    }
    degree
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_values() {
        let f = |m, h, w, c, ws| flops_analytical(m, h, w, c, ws).unwrap().flops;
        assert_eq!(f(AttentionMode::Global, 2, 2, 3, 2), 240);
        assert_eq!(f(AttentionMode::Pixel, 4, 4, 3, 2), 960);
        assert_eq!(f(AttentionMode::Pixel, 4, 4, 8, 2), 5120);
        assert_eq!(f(AttentionMode::CrossWindow, 4, 4, 3, 2), 1152);
        let cwa = flops_analytical(AttentionMode::CrossWindow, 8, 8, 64, 4).unwrap();
        assert_eq!(cwa.params, 4 * 4u64.pow(4));
    }

    #[test]
    fn measured_equals_analytical() {
        for mode in AttentionMode::ALL {
            for (h, w, c, ws) in [(4, 4, 3, 2), (4, 8, 8, 2), (8, 8, 16, 4)] {
                let a = flops_analytical(mode, h, w, c, ws).unwrap().flops;
                assert_eq!(
                    flops_measured(mode, h, w, c, ws).unwrap(),
                    a,
                    "{mode} {h} {w} {c} {ws}"
                );
            }
        }
    }

    #[test]
    fn attention_term_ratio() {
        let (hw, ws, c) = (56u64 * 56, 7u64, 96u64);
        let ga = flops_analytical(AttentionMode::Global, 56, 56, 96, 7)
            .unwrap()
            .flops
            - 4 * hw * c * c;
        let pa = flops_analytical(AttentionMode::Pixel, 56, 56, 96, 7)
            .unwrap()
            .flops
            - 4 * hw * c * c;
        assert_eq!(ga / pa, hw / (ws * ws));
        assert_eq!(ga % pa, 0);
    }

    #[test]
    fn degree_fit() {
        let xs = [8.0, 16.0, 32.0, 64.0];
        assert_eq!(polynomial_degree(&xs, &xs.map(|x| 3.0 * x + 1.0)), 1);
        assert_eq!(polynomial_degree(&xs, &xs.map(|x| x * x + 2.0 * x)), 2);
        assert_eq!(polynomial_degree(&xs, &xs.map(|_| 7.0)), 0);
        assert!("xx".parse::<AttentionMode>().is_err());
        assert_eq!(
            "CWA".parse::<AttentionMode>().unwrap(),
            AttentionMode::CrossWindow
        );
    }

    #[test]
    fn indivisible_windows_rejected() {
        assert!(flops_analytical(AttentionMode::Pixel, 6, 6, 3, 4).is_err());
        assert!(flops_analytical(AttentionMode::Global, 6, 6, 3, 4).is_ok());
    }
}
