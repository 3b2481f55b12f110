//! Ranking and threshold metrics for multi-label predictions.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::LabelVector;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    #[serde(rename = "mAP")]
    pub map: Real,
    #[serde(rename = "CP")]
    pub cp: Real,
    #[serde(rename = "CR")]
    pub cr: Real,
    #[serde(rename = "CF1")]
    pub cf1: Real,
    #[serde(rename = "OP")]
    pub op: Real,
    #[serde(rename = "OR")]
    pub or: Real,
    #[serde(rename = "OF1")]
    pub of1: Real,
    /// `None` for classes without positives.
    pub per_class_ap: Vec<Option<Real>>,
    /// Classes left out of the class averages for lack of positives.
    pub excluded_classes: Vec<usize>,
    pub threshold: Real,
}

fn ratio(num: usize, den: usize) -> Real {
    if den == 0 {
        0.0
    } else {
        num as Real / den as Real
    }
}

fn harmonic(p: Real, r: Real) -> Real {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// All-points average precision of one class. Items are ranked by score,
/// ties broken by index. `None` when there are no positives.
pub fn average_precision(scores: &[Real], labels: &[bool]) -> Option<Real> {
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut hits = 0;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if labels[i] {
            hits += 1;
            sum += hits as Real / (rank + 1) as Real;
        }
    }
    Some(sum / positives as Real)
}

/// Metrics for `scores: [B, n]` in `[0, 1]`. A class counts as predicted
/// when its score exceeds `threshold`.
pub fn evaluate(scores: &Tensor, targets: &[LabelVector], threshold: Real) -> Result<MetricReport> {
    let (b, n) = match scores.shape() {
        [b, n] => (*b, *n),
        s => return Err(Error::Data(format!("scores must be [B, n], got {s:?}"))),
    };
    if targets.len() != b || targets.iter().any(|t| t.n_classes() != n) {
        return Err(Error::Data(format!(
            "{} targets do not match scores [{b}, {n}]",
            targets.len()
        )));
    }
    if scores.data().iter().any(|s| !(0.0..=1.0).contains(s)) {
        return Err(Error::Data("scores must lie in [0, 1]".into()));
    }
    let s = scores.data();
    let mut per_class_ap = Vec::with_capacity(n);
    let mut excluded = Vec::new();
    let (mut cp_sum, mut cr_sum, mut counted) = (0.0, 0.0, 0usize);
    let (mut tp_all, mut pred_all, mut pos_all) = (0, 0, 0);
    for j in 0..n {
        let col: Vec<Real> = (0..b).map(|i| s[i * n + j]).collect();
        let lab: Vec<bool> = targets.iter().map(|t| t.get(j)).collect();
        let ap = average_precision(&col, &lab);
        per_class_ap.push(ap);
        let pred = col.iter().filter(|&&v| v > threshold).count();
        let tp = col
            .iter()
            .zip(&lab)
            .filter(|(&v, &l)| l && v > threshold)
            .count();
        let pos = lab.iter().filter(|&&l| l).count();
        tp_all += tp;
        pred_all += pred;
        pos_all += pos;
        if ap.is_none() {
            excluded.push(j);
            continue;
        }
        cp_sum += ratio(tp, pred);
        cr_sum += ratio(tp, pos);
        counted += 1;
    }
    let map = if counted == 0 {
        0.0
    } else {
        per_class_ap.iter().flatten().sum::<Real>() / counted as Real
    };
    let cp = if counted == 0 {
        0.0
    } else {
        cp_sum / counted as Real
    };
    let cr = if counted == 0 {
        0.0
    } else {
        cr_sum / counted as Real
    };
    let op = ratio(tp_all, pred_all);
    let or = ratio(tp_all, pos_all);
    Ok(MetricReport {
        map,
        cp,
        cr,
        cf1: harmonic(cp, cr),
        op,
        or,
        of1: harmonic(op, or),
        per_class_ap,
        excluded_classes: excluded,
        threshold,
    })
}

impl MetricReport {
    /// Flat `key=value` lines.
    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        for (k, v) in [
            ("mAP", self.map),
            ("CP", self.cp),
            ("CR", self.cr),
            ("CF1", self.cf1),
            ("OP", self.op),
            ("OR", self.or),
            ("OF1", self.of1),
            ("threshold", self.threshold),
        ] {
            writeln!(out, "{k}={v:.6}").unwrap();
        }
        for (j, ap) in self.per_class_ap.iter().enumerate() {
            match ap {
                Some(v) => writeln!(out, "AP[{j}]={v:.6}").unwrap(),
                None => writeln!(out, "AP[{j}]=none").unwrap(),
            }
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}
