use serde::{Deserialize, Serialize};

use crate::tensor::{Real, Tensor};

/// Multi-hot target over `n` classes.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LabelVector {
    bits: Vec<bool>,
}

impl LabelVector {
    pub fn new(n: usize) -> Self {
        Self {
            bits: vec![false; n],
        }
    }

    /// Sets the listed classes; repeats are harmless. Returns `None` when an
    /// id is out of range.
    pub fn from_classes(n: usize, classes: &[usize]) -> Option<Self> {
        let mut v = Self::new(n);
        for &c in classes {
            if c >= n {
                return None;
            }
            v.bits[c] = true;
        }
        Some(v)
    }

    pub fn from_bits(bits: Vec<bool>) -> Self {
        Self { bits }
    }

    pub fn n_classes(&self) -> usize {
        self.bits.len()
    }

    pub fn set(&mut self, class: usize) {
        self.bits[class] = true;
    }

    pub fn get(&self, class: usize) -> bool {
        self.bits[class]
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    /// Number of distinct classes present.
    pub fn z(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn classes(&self) -> Vec<usize> {
        (0..self.bits.len()).filter(|&i| self.bits[i]).collect()
    }

    /// Compact `0`/`1` string, one character per class.
    pub fn to_bit_string(&self) -> String {
        self.bits
            .iter()
            .map(|&b| if b { '1' } else { '0' })
            .collect()
    }

    pub fn parse_bit_string(s: &str) -> Option<Self> {
        s.chars()
            .map(|c| match c {
                '0' => Some(false),
                '1' => Some(true),
                _ => None,
            })
            .collect::<Option<Vec<_>>>()
            .map(Self::from_bits)
    }
}

/// Stacks label vectors into a `[B, n]` matrix of zeros and ones.
pub fn label_matrix(labels: &[LabelVector]) -> Tensor {
    let n = labels.first().map_or(0, |l| l.n_classes());
    let data: Vec<Real> = labels
        .iter()
        .flat_map(|l| l.bits().iter().map(|&b| if b { 1.0 } else { 0.0 }))
        .collect();
    Tensor::new(&[labels.len(), n], data).expect("labels share one class count")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicates_are_idempotent_and_z_is_popcount() {
        let v = LabelVector::from_classes(5, &[1, 3, 1]).unwrap();
        assert_eq!(v.classes(), vec![1, 3]);
        assert_eq!(v.z(), 2);
        assert_eq!(LabelVector::from_classes(5, &[]).unwrap().z(), 0);
        assert!(LabelVector::from_classes(2, &[2]).is_none());
        let s = v.to_bit_string();
        assert_eq!(s, "01010");
        assert_eq!(LabelVector::parse_bit_string(&s).unwrap(), v);
        assert!(LabelVector::parse_bit_string("01x").is_none());
    }
}
