use std::fs;
use std::path::{Path, PathBuf};

use crate::data::imageops::{save_gray_png, save_rgb_png};
use crate::data::resize_bilinear;
use crate::error::{Error, Result};
use crate::model::MlTr;
use crate::tensor::{Real, Tensor};

/// Weight of the heat layer in the overlay.
const OVERLAY_ALPHA: Real = 0.5;

/// Rescales to `[0, 1]`; a constant input maps to all zeros.
pub fn normalize_min_max(values: &[Real]) -> Vec<Real> {
    let lo = values.iter().cloned().fold(Real::INFINITY, Real::min);
    let hi = values.iter().cloned().fold(Real::NEG_INFINITY, Real::max);
    if !(hi > lo) {
        return vec![0.0; values.len()];
    }
    values.iter().map(|v| (v - lo) / (hi - lo)).collect()
}

/// Upsamples one `[h, w]` map to `out_h × out_w` and normalizes it.
pub fn heat(map: &Tensor, out_h: usize, out_w: usize) -> Result<Vec<Real>> {
    let (h, w) = (map.shape()[0], map.shape()[1]);
    let up = resize_bilinear(&map.reshape(&[1, h, w])?, out_h, out_w)?;
    Ok(normalize_min_max(up.data()))
}

/// Blend of `image: [3, H, W]` with a red heat layer.
pub fn overlay(image: &Tensor, heat: &[Real]) -> Tensor {
    let plane = heat.len();
    let mut out = image.data().to_vec();
    for ch in 0..3 {
        for (k, &hv) in heat.iter().enumerate() {
            let layer = if ch == 0 { hv } else { 0.0 };
            let v = &mut out[ch * plane + k];
            *v = (1.0 - OVERLAY_ALPHA) * *v + OVERLAY_ALPHA * layer;
        }
    }
    Tensor::new(image.shape(), out).expect("same shape")
}

/// Writes `channel_<k>.png` and `channel_<k>_overlay.png` for each requested
/// last-layer channel of `image: [3, H, W]`. Returns the written paths.
pub fn export_heatmaps(
    model: &MlTr,
    image: &Tensor,
    channels: &[usize],
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    let d = model.spec.head_dim();
    if let Some(&bad) = channels.iter().find(|&&c| c >= d) {
        return Err(Error::Config(format!(
            "channel {bad} out of range, last layer has {d} channels"
        )));
    }
    let r = model.spec.resolution;
    if image.shape() != [3, r, r] {
        return Err(Error::Data(format!(
            "image {:?} does not match variant resolution {r}",
            image.shape()
        )));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let batch = image.reshape(&[1, 3, r, r])?;
    let maps = model.infer(&batch)?.feature_maps;
    let g = maps.shape()[2];
    let mut written = Vec::new();
    for &c in channels {
        let map = Tensor::new(&[g, g], maps.data()[c * g * g..(c + 1) * g * g].to_vec())?;
        let h = heat(&map, r, r)?;
        let gray = out_dir.join(format!("channel_{c}.png"));
        save_gray_png(&gray, &h, r, r)?;
        let blend = out_dir.join(format!("channel_{c}_overlay.png"));
        save_rgb_png(&blend, &overlay(image, &h))?;
        written.push(gray);
        written.push(blend);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::VariantSpec;

    #[test]
    fn constant_map_is_zero_and_ramp_interpolates() {
        let flat = heat(&Tensor::full(&[2, 2], 3.0), 4, 4).unwrap();
        assert!(flat.iter().all(|&v| v == 0.0));
        let ramp = Tensor::new(&[2, 2], vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        let h = heat(&ramp, 4, 4).unwrap();
        for r in 0..4 {
            for c in 0..4 {
                assert!((h[r * 4 + c] - c as Real / 3.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn writes_images_at_input_resolution() {
        let model = MlTr::new(VariantSpec::tiny(), 3, 0).unwrap();
        let img = Tensor::full(&[3, 16, 16], 0.5);
        let dir = tempfile::tempdir().unwrap();
        let files = export_heatmaps(&model, &img, &[0, 5], dir.path()).unwrap();
        assert_eq!(files.len(), 4);
        for f in &files {
            let dims = image::image_dimensions(f).unwrap();
            assert_eq!(dims, (16, 16));
        }
        assert!(export_heatmaps(&model, &img, &[64], dir.path()).is_err());
    }
}
