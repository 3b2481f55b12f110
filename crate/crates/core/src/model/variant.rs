use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const N_LAYERS: usize = 4;

/// Architecture hyper-parameters of one MlTr variant.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VariantSpec {
    pub name: String,
    /// Square input resolution in pixels.
    pub resolution: usize,
    pub patch: usize,
    /// Channels of the first layer; layer `i` has `channels << i`.
    pub channels: usize,
    pub window: usize,
    pub blocks: [usize; N_LAYERS],
}

/// Geometry of one layer as produced by [`VariantSpec::shape_trace`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct LayerShape {
    pub grid: usize,
    pub channels: usize,
    pub windows: usize,
    pub tokens_per_window: usize,
    /// Object-aware tokens appended to this layer's window.
    pub extra: usize,
}

impl VariantSpec {
    pub const BUILTIN: [&'static str; 5] = ["s", "m", "l", "tiny", "tiny32"];

    pub fn new(
        name: &str,
        resolution: usize,
        patch: usize,
        channels: usize,
        window: usize,
        blocks: [usize; N_LAYERS],
    ) -> Result<Self> {
        let spec = Self {
            name: name.to_string(),
            resolution,
            patch,
            channels,
            window,
            blocks,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn mltr_s() -> Self {
        Self::new("s", 224, 4, 96, 7, [1, 1, 3, 1]).expect("valid built-in")
    }

    pub fn mltr_m() -> Self {
        Self::new("m", 384, 4, 96, 12, [1, 1, 9, 1]).expect("valid built-in")
    }

    pub fn mltr_l() -> Self {
        Self::new("l", 384, 4, 128, 12, [1, 1, 9, 1]).expect("valid built-in")
    }

    /// 16×16 input, one block per layer. Patch size 1 keeps the last grid at 2×2.
    pub fn tiny() -> Self {
        Self::new("tiny", 16, 1, 8, 2, [1, 1, 1, 1]).expect("valid built-in")
    }

    /// 32×32 input with 16 base channels.
    pub fn tiny32() -> Self {
        Self::new("tiny32", 32, 2, 16, 2, [1, 1, 1, 1]).expect("valid built-in")
    }

    pub fn builtin(name: &str) -> Result<Self> {
        match name.to_ascii_lowercase().trim_start_matches("mltr-") {
            "s" => Ok(Self::mltr_s()),
            "m" => Ok(Self::mltr_m()),
            "l" => Ok(Self::mltr_l()),
            "tiny" => Ok(Self::tiny()),
            "tiny32" => Ok(Self::tiny32()),
            _ => Err(Error::Config(format!(
                "unknown variant `{name}` (expected one of {})",
                Self::BUILTIN.join(", ")
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(format!("variant `{}`: {msg}", self.name)));
        if self.resolution == 0 || self.patch == 0 || self.channels == 0 || self.window == 0 {
            return bad("resolution, patch, channels and window must be positive".into());
        }
        if self.blocks.iter().any(|&b| b == 0) {
            return bad(format!(
                "every layer needs at least one block, got {:?}",
                self.blocks
            ));
        }
        if self.resolution % self.patch != 0 {
            return bad(format!(
                "patch size {} does not divide resolution {}",
                self.patch, self.resolution
            ));
        }
        let grid = self.resolution / self.patch;
        let step = self.window << (N_LAYERS - 1);
        if grid % step != 0 {
            return bad(format!(
                "grid {grid} is not divisible by window {} x {}",
                self.window,
                1 << (N_LAYERS - 1)
            ));
        }
        if grid / step != 1 {
            return bad(format!(
                "last layer grid {} must be a single {}x{} window for the object-aware token",
                grid >> (N_LAYERS - 1),
                self.window,
                self.window
            ));
        }
        Ok(())
    }

    pub fn grid(&self, layer: usize) -> usize {
        (self.resolution / self.patch) >> layer
    }

    pub fn layer_channels(&self, layer: usize) -> usize {
        self.channels << layer
    }

    /// Width of the last layer, the object-aware token and the heads.
    pub fn head_dim(&self) -> usize {
        self.layer_channels(N_LAYERS - 1)
    }

    pub fn shape_trace(&self) -> Vec<LayerShape> {
        (0..N_LAYERS)
            .map(|i| {
                let g = self.grid(i);
                LayerShape {
                    grid: g,
                    channels: self.layer_channels(i),
                    windows: (g / self.window).pow(2),
                    tokens_per_window: self.window * self.window,
                    extra: usize::from(i == N_LAYERS - 1),
                }
            })
            .collect()
    }
}

impl fmt::Display for VariantSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} (resolution {}, P={}, C={}, w_s={}, blocks {:?})",
            self.name, self.resolution, self.patch, self.channels, self.window, self.blocks
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtins_validate() {
        for name in VariantSpec::BUILTIN {
            VariantSpec::builtin(name).unwrap();
        }
        assert_eq!(
            VariantSpec::builtin("MlTr-S").unwrap(),
            VariantSpec::mltr_s()
        );
        assert!(VariantSpec::builtin("xl").is_err());
    }

    #[test]
    fn rejects_unpartitionable_grids() {
        // 16 / 4 = 4 cannot host three halvings onto a 2x2 window
        let err = VariantSpec::new("bad", 16, 4, 8, 2, [1; 4]).unwrap_err();
        assert!(err.to_string().contains("not divisible"), "{err}");
        let err = VariantSpec::new("bad", 64, 1, 8, 2, [1; 4]).unwrap_err();
        assert!(err.to_string().contains("single"), "{err}");
        assert!(VariantSpec::new("bad", 30, 4, 8, 2, [1; 4]).is_err());
    }
}
