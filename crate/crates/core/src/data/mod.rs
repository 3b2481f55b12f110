//! Datasets: procedural glyph images, on-disk persistence, a detection-style
//! annotation reader and cutout augmentation.

mod annotations;
mod augment;
pub(crate) mod imageops;
mod persist;
mod synth;

pub use annotations::{load_annotations, IssueKind, LoadIssue, LoadReport};
pub use augment::cutout;
pub use imageops::{decode_image, image_to_tensor, resize_bilinear};
pub use persist::{load_dataset, save_dataset, MANIFEST};
pub use synth::{generate, Glyph, Shape, SizeTier, SynthSpec};

use crate::error::{Error, Result};
use crate::labels::LabelVector;
use crate::tensor::{Real, Tensor};

/// Images `[3, H, W]` in `[0, 1]` with their labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub resolution: usize,
    pub n_classes: usize,
    pub images: Vec<Tensor>,
    pub labels: Vec<LabelVector>,
}

impl Dataset {
    pub fn new(resolution: usize, n_classes: usize) -> Self {
        Self {
            resolution,
            n_classes,
            images: Vec::new(),
            labels: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn push(&mut self, image: Tensor, label: LabelVector) -> Result<()> {
        let r = self.resolution;
        if image.shape() != [3, r, r] {
            return Err(Error::Data(format!(
                "image shape {:?} does not match [3, {r}, {r}]",
                image.shape()
            )));
        }
        if label.n_classes() != self.n_classes {
            return Err(Error::Data(format!(
                "label has {} classes, dataset has {}",
                label.n_classes(),
                self.n_classes
            )));
        }
        self.images.push(image);
        self.labels.push(label);
        Ok(())
    }

    /// Stacks the selected samples into `[B, 3, H, W]`.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<LabelVector>) {
        let r = self.resolution;
        let mut data: Vec<Real> = Vec::with_capacity(indices.len() * 3 * r * r);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(self.images[i].data());
            labels.push(self.labels[i].clone());
        }
        let t = Tensor::new(&[indices.len(), 3, r, r], data).expect("uniform image shapes");
        (t, labels)
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            resolution: self.resolution,
            n_classes: self.n_classes,
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i].clone()).collect(),
        }
    }

    /// 90/10 train/validation split decided by a seeded hash of each index.
    pub fn split(&self, seed: u64) -> (Vec<usize>, Vec<usize>) {
        (0..self.len()).partition(|&i| split_hash(seed, i as u64) % 10 != 0)
    }
}

fn split_hash(seed: u64, index: u64) -> u64 {
    // splitmix64 finaliser
    let mut z = seed ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_is_seeded_and_roughly_ninety_ten() {
        let mut ds = Dataset::new(2, 1);
        for _ in 0..1000 {
            ds.push(Tensor::zeros(&[3, 2, 2]), LabelVector::new(1))
                .unwrap();
        }
        let (train, val) = ds.split(7);
        assert_eq!(train.len() + val.len(), 1000);
        assert!((70..=130).contains(&val.len()), "{}", val.len());
        assert_eq!(ds.split(7), (train, val.clone()));
        assert_ne!(ds.split(8).1, val);
        assert!(ds
            .push(Tensor::zeros(&[3, 3, 3]), LabelVector::new(1))
            .is_err());
    }
}
