//! Arc sigmoid, asymmetric loss, object-count loss and their combination.
//!
//! Every loss has a tape version used for training and a plain `*_value`
//! version on slices that serves as a reference.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::{label_matrix, LabelVector};
use crate::model::cosine;
use crate::tensor::{Real, Tape, Tensor, TensorError, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Logit scale applied to the cosine.
    pub s: Real,
    /// Probability margin subtracted from negatives.
    pub m: Real,
    pub gamma_plus: Real,
    pub gamma_minus: Real,
    /// Weight of the object-count term.
    pub otl_weight: Real,
    /// Use `1 / (1 + e^{+x})` exactly as typeset instead of the usual sigmoid.
    pub strict_sign: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            s: 8.0,
            m: 0.05,
            gamma_plus: 0.0,
            gamma_minus: 4.0,
            otl_weight: 1.0,
            strict_sign: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.s > 0.0
            && (0.0..1.0).contains(&self.m)
            && self.gamma_plus >= 0.0
            && self.gamma_minus >= 0.0
            && self.otl_weight >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "invalid loss configuration {self:?}"
            )))
        }
    }

    fn sign(&self) -> Real {
        if self.strict_sign {
            -1.0
        } else {
            1.0
        }
    }
}

pub fn sigmoid(x: Real) -> Real {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Probabilities from `s · cos` logits.
pub fn arc_probabilities(tape: &mut Tape, logits: Var, cfg: &LossConfig) -> Result<Var> {
    let x = if cfg.strict_sign {
        tape.neg(logits)?
    } else {
        logits
    };
    Ok(tape.sigmoid(x)?)
}

/// `sigmoid(s · cos θ)` between rows of `features: [B, D]` and columns of
/// `class_weights: [D, n]`.
pub fn arc_sigmoid(features: &Tensor, class_weights: &Tensor, cfg: &LossConfig) -> Result<Tensor> {
    let mut tape = Tape::new();
    let x = tape.constant(features.shape(), features.data().to_vec())?;
    let w = tape.constant(class_weights.shape(), class_weights.data().to_vec())?;
    let cos = cosine(&mut tape, x, w)?;
    let logits = tape.scale(cos, cfg.s)?;
    let p = arc_probabilities(&mut tape, logits, cfg)?;
    Ok(tape.to_tensor(p))
}

/// Probability for one cosine value.
pub fn arc_sigmoid_value(cos: Real, cfg: &LossConfig) -> Real {
    sigmoid(cfg.sign() * cfg.s * cos.clamp(-1.0, 1.0))
}

/// Per-sample asymmetric loss `[B]` from probabilities `p: [B, n]` and
/// targets `y: [B, n]` of zeros and ones.
pub fn asymmetric_loss(tape: &mut Tape, p: Var, y: Var, cfg: &LossConfig) -> Result<Var> {
    let lp = tape.log(p)?;
    let mut pos = tape.mul(y, lp)?;
    if cfg.gamma_plus != 0.0 {
        let one_minus = tape.neg(p)?;
        let one_minus = tape.add_scalar(one_minus, 1.0)?;
        let w = tape.pow(one_minus, cfg.gamma_plus)?;
        pos = tape.mul(pos, w)?;
    }

    let shifted = tape.add_scalar(p, -cfg.m)?;
    let pm = tape.relu(shifted)?;
    let q = tape.neg(pm)?;
    let q = tape.add_scalar(q, 1.0)?;
    let lq = tape.log(q)?;
    let ny = tape.neg(y)?;
    let ny = tape.add_scalar(ny, 1.0)?;
    let mut neg = tape.mul(ny, lq)?;
    if cfg.gamma_minus != 0.0 {
        let w = tape.pow(pm, cfg.gamma_minus)?;
        neg = tape.mul(neg, w)?;
    }
    let total = tape.add(pos, neg)?;
    let total = tape.neg(total)?;
    Ok(tape.sum_axis(total, 1, false)?)
}

/// Reference asymmetric loss of one sample.
pub fn asl_value(p: &[Real], y: &[bool], cfg: &LossConfig) -> Real {
    p.iter()
        .zip(y)
        .map(|(&p, &y)| {
            if y {
                -(1.0 - p).powf(cfg.gamma_plus) * p.ln()
            } else {
                let pm = (p - cfg.m).max(0.0);
                let w = if cfg.gamma_minus == 0.0 {
                    1.0
                } else {
                    pm.powf(cfg.gamma_minus)
                };
                -w * (1.0 - pm).ln()
            }
        })
        .sum()
}

/// Per-sample binary cross-entropy `[B]`.
pub fn bce_loss(tape: &mut Tape, p: Var, y: Var) -> Result<Var> {
    let lp = tape.log(p)?;
    let pos = tape.mul(y, lp)?;
    let q = tape.neg(p)?;
    let q = tape.add_scalar(q, 1.0)?;
    let lq = tape.log(q)?;
    let ny = tape.neg(y)?;
    let ny = tape.add_scalar(ny, 1.0)?;
    let neg = tape.mul(ny, lq)?;
    let total = tape.add(pos, neg)?;
    let total = tape.neg(total)?;
    Ok(tape.sum_axis(total, 1, false)?)
}

pub fn bce_value(p: &[Real], y: &[bool]) -> Real {
    p.iter()
        .zip(y)
        .map(|(&p, &y)| if y { -p.ln() } else { -(1.0 - p).ln() })
        .sum()
}

/// Per-sample `-log softmax(logits)[z]`, `[B]`, for `logits: [B, n + 1]`.
pub fn object_token_loss(tape: &mut Tape, logits: Var, z: &[usize]) -> Result<Var> {
    let shape = tape.shape(logits).to_vec();
    if shape.len() != 2 || shape[0] != z.len() {
        return Err(TensorError::Contract(format!(
            "count logits {shape:?} do not match {} targets",
            z.len()
        ))
        .into());
    }
    let k = shape[1];
    if let Some(&bad) = z.iter().find(|&&zi| zi >= k) {
        return Err(
            TensorError::Contract(format!("class count {bad} outside 0..={}", k - 1)).into(),
        );
    }
    let ls = tape.log_softmax(logits, 1)?;
    let map: Vec<usize> = z.iter().enumerate().map(|(b, &zi)| b * k + zi).collect();
    let picked = tape.gather(ls, &[z.len()], Arc::from(map))?;
    Ok(tape.neg(picked)?)
}

pub fn otl_value(logits: &[Real], z: usize) -> Real {
    let max = logits.iter().cloned().fold(Real::NEG_INFINITY, Real::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<Real>().ln();
    lse - logits[z]
}

/// Tape handles of the combined loss.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    /// Batch mean of `ASL_i + w·OTL_i`, shape `[1]`.
    pub total: Var,
    /// Per-sample asymmetric loss `[B]`.
    pub asl: Var,
    /// Per-sample object-count loss `[B]`.
    pub otl: Var,
}

pub fn combined_loss(
    tape: &mut Tape,
    label_logits: Var,
    count_logits: Var,
    targets: &[LabelVector],
    cfg: &LossConfig,
) -> Result<LossParts> {
    let y = label_matrix(targets);
    if tape.shape(label_logits) != y.shape() {
        return Err(TensorError::Shape {
            op: "combined_loss",
            lhs: tape.shape(label_logits).to_vec(),
            rhs: y.shape().to_vec(),
        }
        .into());
    }
    let yv = tape.constant(&y.shape().to_vec(), y.into_data())?;
    let p = arc_probabilities(tape, label_logits, cfg)?;
    let asl = asymmetric_loss(tape, p, yv, cfg)?;
    let z: Vec<usize> = targets.iter().map(LabelVector::z).collect();
    let otl = object_token_loss(tape, count_logits, &z)?;
    let weighted = tape.scale(otl, cfg.otl_weight)?;
    let per_sample = tape.add(asl, weighted)?;
    let total = tape.mean(per_sample)?;
    Ok(LossParts { total, asl, otl })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfg(gp: Real, gm: Real, m: Real) -> LossConfig {
        LossConfig {
            gamma_plus: gp,
            gamma_minus: gm,
            m,
            ..Default::default()
        }
    }

    fn tape_asl(p: &[Real], y: &[bool], c: &LossConfig) -> Real {
        let mut tape = Tape::new();
        let pv = tape.constant(&[1, p.len()], p.to_vec()).unwrap();
        let yd = y.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        let yv = tape.constant(&[1, y.len()], yd).unwrap();
        let l = asymmetric_loss(&mut tape, pv, yv, c).unwrap();
        tape.value(l)[0]
    }

    #[test]
    fn scalar_cases() {
        let d = LossConfig::default();
        assert_eq!(arc_sigmoid_value(0.0, &d), 0.5);
        assert!((arc_sigmoid_value(1.0, &d) - 0.999_664_649).abs() < 1e-9);
        let strict = LossConfig {
            strict_sign: true,
            ..d.clone()
        };
        assert!((arc_sigmoid_value(1.0, &strict) - (1.0 - 0.999_664_649)).abs() < 1e-9);

        assert!((asl_value(&[0.5], &[true], &d) - 0.693_147_18).abs() < 1e-8);
        assert_eq!(asl_value(&[0.05], &[false], &d), 0.0);
        assert!((asl_value(&[0.5], &[false], &d) - 0.024_517).abs() < 1e-5);
        assert_eq!(tape_asl(&[0.05], &[false], &d), 0.0);
        assert!((tape_asl(&[0.5], &[false], &d) - asl_value(&[0.5], &[false], &d)).abs() < 1e-15);

        assert!(
            (bce_value(&[0.5; 4], &[true, false, true, false]) - 4.0 * 2f64.ln() as Real).abs()
                < 1e-12
        );
        assert!((otl_value(&[0.0; 81], 5) - (81.0 as Real).ln()).abs() < 1e-12);
    }

    #[test]
    fn arc_sigmoid_rejects_zero_norm_and_is_scale_invariant() {
        let d = LossConfig::default();
        let w = Tensor::new(&[2, 2], vec![1.0, 0.3, -0.5, 2.0]).unwrap();
        let x = Tensor::new(&[1, 2], vec![0.7, -1.1]).unwrap();
        let x3 = Tensor::new(&[1, 2], vec![2.1, -3.3]).unwrap();
        let a = arc_sigmoid(&x, &w, &d).unwrap();
        let b = arc_sigmoid(&x3, &w, &d).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-14);
        assert!(arc_sigmoid(&Tensor::zeros(&[1, 2]), &w, &d).is_err());
        let orth = arc_sigmoid(
            &Tensor::new(&[1, 2], vec![0.0, 1.0]).unwrap(),
            &Tensor::new(&[2, 1], vec![1.0, 0.0]).unwrap(),
            &d,
        )
        .unwrap();
        assert_eq!(orth.data(), &[0.5]);
    }

    #[test]
    fn otl_gradient_is_softmax_minus_onehot() {
        let logits = vec![0.3, -1.0, 2.0, 0.5];
        let mut tape = Tape::new();
        let v = tape
            .param(&Tensor::new(&[1, 4], logits.clone()).unwrap())
            .unwrap();
        let l = object_token_loss(&mut tape, v, &[2]).unwrap();
        let l = tape.sum(l).unwrap();
        let g = tape.backward(l).unwrap().get(v).unwrap().to_vec();
        let max = 2.0;
        let denom: Real = logits.iter().map(|x: &Real| (x - max).exp()).sum();
        for (i, gi) in g.iter().enumerate() {
            let s = (logits[i] - max).exp() / denom;
            let expect = s - if i == 2 { 1.0 } else { 0.0 };
            assert!((gi - expect).abs() < 1e-12);
        }
        let mut tape = Tape::new();
        let v = tape.param(&Tensor::zeros(&[1, 4])).unwrap();
        assert!(object_token_loss(&mut tape, v, &[4]).is_err());
    }

    #[test]
    fn combined_loss_is_batch_mean_and_decomposes() {
        let targets = vec![
            LabelVector::from_classes(3, &[0]).unwrap(),
            LabelVector::from_classes(3, &[1, 2]).unwrap(),
        ];
        let label = vec![2.0, -1.0, 0.5, -3.0, 4.0, 1.0];
        let count = vec![0.1, 0.2, -0.3, 0.0, 1.0, 0.4, 0.2, -0.2];
        let c = LossConfig::default();
        let run = |cfg: &LossConfig| {
            let mut tape = Tape::new();
            let l = tape.constant(&[2, 3], label.clone()).unwrap();
            let k = tape.constant(&[2, 4], count.clone()).unwrap();
            let parts = combined_loss(&mut tape, l, k, &targets, cfg).unwrap();
            tape.value(parts.total)[0]
        };
        let per = |i: usize, w: Real| {
            let p: Vec<Real> = label[i * 3..i * 3 + 3]
                .iter()
                .map(|&x| sigmoid(x))
                .collect();
            asl_value(&p, targets[i].bits(), &c)
                + w * otl_value(&count[i * 4..i * 4 + 4], targets[i].z())
        };
        assert!((run(&c) - (per(0, 1.0) + per(1, 1.0)) / 2.0).abs() < 1e-12);
        let silent = LossConfig {
            otl_weight: 0.0,
            ..c.clone()
        };
        assert!((run(&silent) - (per(0, 0.0) + per(1, 0.0)) / 2.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn asl_reduces_to_bce(
            p in proptest::collection::vec(0.001f64..0.999, 1..12),
            seed in any::<u64>(),
        ) {
            let p: Vec<Real> = p.into_iter().map(|v| v as Real).collect();
            let y: Vec<bool> = (0..p.len()).map(|i| (seed >> (i % 64)) & 1 == 1).collect();
            let c = cfg(0.0, 0.0, 0.0);
            prop_assert!((asl_value(&p, &y, &c) - bce_value(&p, &y)).abs() < 1e-12);
            prop_assert!((tape_asl(&p, &y, &c) - bce_value(&p, &y)).abs() < 1e-12);
        }

        #[test]
        fn easy_negatives_are_silent(p in 0.0001f64..=0.05) {
            let c = LossConfig::default();
            prop_assert_eq!(asl_value(&[p as Real], &[false], &c), 0.0);
            prop_assert_eq!(tape_asl(&[p as Real], &[false], &c), 0.0);
        }

        #[test]
        fn arc_sigmoid_is_monotone(a in -1.0f64..1.0, b in -1.0f64..1.0) {
            let c = LossConfig::default();
            let (a, b) = (a as Real, b as Real);
            if a < b {
                prop_assert!(arc_sigmoid_value(a, &c) < arc_sigmoid_value(b, &c));
            }
        }
    }
}
