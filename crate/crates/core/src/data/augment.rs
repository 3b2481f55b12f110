use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Zeroes one `size × size` square of `image: [C, H, W]` in every channel.
/// The square lies fully inside the image; its corner is drawn uniformly.
pub fn cutout(image: &Tensor, size: usize, seed: u64) -> Result<Tensor> {
    let (c, h, w) = match image.shape() {
        [c, h, w] => (*c, *h, *w),
        s => return Err(Error::Data(format!("expected [C, H, W] image, got {s:?}"))),
    };
    if size > h || size > w {
        return Err(Error::Config(format!(
            "cutout size {size} exceeds image {h}x{w}"
        )));
    }
    let mut out = image.clone();
    if size == 0 {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r0 = rng.random_range(0..=h - size);
    let c0 = rng.random_range(0..=w - size);
    let d = out.data_mut();
    for ch in 0..c {
        for r in r0..r0 + size {
            let row = (ch * h + r) * w;
            d[row + c0..row + c0 + size].fill(0.0);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ones(h: usize, w: usize) -> Tensor {
        Tensor::full(&[3, h, w], 1.0)
    }

    #[test]
    fn boundary_sizes() {
        let x = ones(8, 8);
        assert_eq!(cutout(&x, 0, 1).unwrap(), x);
        assert!(cutout(&x, 8, 1).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(cutout(&x, 9, 1).is_err());
    }

    proptest! {
        #[test]
        fn zeroes_exactly_size_squared(size in 0usize..=10, seed in any::<u64>()) {
            let y = cutout(&ones(10, 12), size, seed).unwrap();
            let zeros = y.data().iter().filter(|&&v| v == 0.0).count();
            prop_assert_eq!(zeros, 3 * size * size);
            prop_assert_eq!(cutout(&ones(10, 12), size, seed).unwrap(), y);
        }
    }
}
