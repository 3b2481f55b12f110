use std::path::Path;

use image::{DynamicImage, GrayImage, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// RGB image as `[3, H, W]` in `[0, 1]`.
pub fn image_to_tensor(img: &DynamicImage) -> Tensor {
    let rgb = img.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (x, y, px) in rgb.enumerate_pixels() {
        for ch in 0..3 {
            data[(ch * h + y as usize) * w + x as usize] = px[ch] as Real / 255.0;
        }
    }
    Tensor::new(&[3, h, w], data).expect("pixel count")
}

/// Decodes a PPM/PGM or PNG file.
pub fn decode_image(path: &Path) -> Result<Tensor> {
    let img = image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    Ok(image_to_tensor(&img))
}

/// Bilinear resize of `[C, H, W]` with corner pixels aligned, so that the
/// corners of input and output sample the same points.
pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (c, h, w) = match x.shape() {
        [c, h, w] if *h > 0 && *w > 0 => (*c, *h, *w),
        s => return Err(Error::Data(format!("expected [C, H, W] image, got {s:?}"))),
    };
    let coord = |i: usize, n_in: usize, n_out: usize| -> (usize, usize, Real) {
        if n_out == 1 || n_in == 1 {
            return (0, 0, 0.0);
        }
        let pos = i as Real * (n_in - 1) as Real / (n_out - 1) as Real;
        let lo = (pos.floor() as usize).min(n_in - 1);
        let hi = (lo + 1).min(n_in - 1);
        (lo, hi, pos - lo as Real)
    };
    let src = x.data();
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for i in 0..out_h {
            let (r0, r1, fr) = coord(i, h, out_h);
            for j in 0..out_w {
                let (c0, c1, fc) = coord(j, w, out_w);
                let top = plane[r0 * w + c0] * (1.0 - fc) + plane[r0 * w + c1] * fc;
                let bot = plane[r1 * w + c0] * (1.0 - fc) + plane[r1 * w + c1] * fc;
                out.push(top * (1.0 - fr) + bot * fr);
            }
        }
    }
    Ok(Tensor::new(&[c, out_h, out_w], out)?)
}

fn to_u8(v: Real) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub(crate) fn save_gray_png(path: &Path, values: &[Real], w: usize, h: usize) -> Result<()> {
    let img = GrayImage::from_raw(
        w as u32,
        h as u32,
        values.iter().map(|&v| to_u8(v)).collect(),
    )
    .expect("buffer matches dimensions");
    img.save(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

/// Writes `[3, H, W]` in `[0, 1]` as an RGB PNG.
pub(crate) fn save_rgb_png(path: &Path, x: &Tensor) -> Result<()> {
    let (h, w) = (x.shape()[1], x.shape()[2]);
    let d = x.data();
    let img = RgbImage::from_fn(w as u32, h as u32, |c, r| {
        let k = r as usize * w + c as usize;
        image::Rgb([to_u8(d[k]), to_u8(d[h * w + k]), to_u8(d[2 * h * w + k])])
    });
    img.save(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn columns_interpolate_linearly() {
        let x = Tensor::new(&[1, 2, 2], vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        let y = resize_bilinear(&x, 4, 4).unwrap();
        for r in 0..4 {
            for c in 0..4 {
                assert!((y.data()[r * 4 + c] - c as Real / 3.0).abs() < 1e-12);
            }
        }
        let same = resize_bilinear(&x, 2, 2).unwrap();
        assert_eq!(same, x);
    }

    #[test]
    fn resize_keeps_range() {
        let data: Vec<Real> = (0..3 * 5 * 7)
            .map(|i| ((i * 37) % 101) as Real / 100.0)
            .collect();
        let x = Tensor::new(&[3, 5, 7], data).unwrap();
        let y = resize_bilinear(&x, 16, 9).unwrap();
        assert!(y.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn png_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.png");
        let x = Tensor::new(&[3, 1, 2], vec![0.0, 1.0, 0.2, 0.4, 1.0, 0.0]).unwrap();
        save_rgb_png(&p, &x).unwrap();
        let y = decode_image(&p).unwrap();
        assert!(y.max_abs_diff(&x) < 1.0 / 255.0);
    }
}
