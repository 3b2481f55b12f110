use std::fs::{self, File};
use std::io::Write;
use std::path::PathBuf;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::checkpoint::Checkpoint;
use super::optim::{AdamW, OneCycle};
use crate::data::{cutout, Dataset};
use crate::error::{Error, Result};
use crate::labels::LabelVector;
use crate::losses::{arc_sigmoid_value, asl_value, combined_loss, otl_value, LossConfig};
use crate::metrics::{evaluate, MetricReport};
use crate::model::{MlTr, VariantSpec};
use crate::tensor::{Real, Tape, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub variant: VariantSpec,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: Real,
    pub weight_decay: Real,
    pub warmup_frac: Real,
    pub floor_frac: Real,
    pub loss: LossConfig,
    pub seed: u64,
    /// Side of the cutout square; 0 disables it.
    pub cutout: usize,
    /// Train on the 90% split and also report the held-out 10%.
    pub holdout: bool,
    pub threshold: Real,
    /// Evaluate (and check early stopping) every this many epochs.
    pub eval_every: usize,
    /// Stop once a clean evaluation of the training set reaches this mAP...
    pub target_map: Option<Real>,
    /// ...and this mean loss. Either target alone also stops training.
    pub target_loss: Option<Real>,
    pub checkpoint: Option<PathBuf>,
    pub log: Option<PathBuf>,
    pub resume: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            variant: VariantSpec::tiny32(),
            epochs: 200,
            batch_size: 8,
            lr: 1e-4,
            weight_decay: 1e-2,
            warmup_frac: 0.1,
            floor_frac: 1e-2,
            loss: LossConfig::default(),
            seed: 0,
            cutout: 0,
            holdout: false,
            threshold: 0.5,
            eval_every: 1,
            target_map: None,
            target_loss: None,
            checkpoint: None,
            log: None,
            resume: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.variant.validate()?;
        self.loss.validate()?;
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if self.batch_size == 0 || self.eval_every == 0 {
            return bad("batch_size and eval_every must be positive");
        }
        if !(self.lr > 0.0 && self.weight_decay >= 0.0) {
            return bad("lr must be positive and weight_decay non-negative");
        }
        if !((0.0..1.0).contains(&self.warmup_frac)
            && self.floor_frac > 0.0
            && self.floor_frac <= 1.0)
        {
            return bad("warmup_frac must lie in [0, 1) and floor_frac in (0, 1]");
        }
        if self.cutout > self.variant.resolution {
            return bad("cutout exceeds the input resolution");
        }
        Ok(())
    }
}

/// Clean (un-augmented) evaluation of a dataset.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalResult {
    pub report: MetricReport,
    /// Mean combined loss.
    pub loss: Real,
    /// Top-1 accuracy of the count head.
    pub count_accuracy: Real,
}

/// Scores, loss and count accuracy of `model` on `data`.
pub fn evaluate_model(
    model: &MlTr,
    data: &Dataset,
    loss: &LossConfig,
    batch_size: usize,
    threshold: Real,
) -> Result<EvalResult> {
    if data.is_empty() {
        return Err(Error::Data("cannot evaluate an empty dataset".into()));
    }
    if data.n_classes != model.n_classes {
        return Err(Error::Data(format!(
            "dataset has {} classes, model has {}",
            data.n_classes, model.n_classes
        )));
    }
    let n = model.n_classes;
    let mut scores = Vec::with_capacity(data.len() * n);
    let (mut total, mut correct) = (0.0, 0usize);
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let (images, labels) = data.batch(chunk);
        let out = model.infer(&images)?;
        let k = n + 1;
        for (b, y) in labels.iter().enumerate() {
            let p: Vec<Real> = out.cos.data()[b * n..(b + 1) * n]
                .iter()
                .map(|&c| arc_sigmoid_value(c, loss))
                .collect();
            let counts = &out.count_logits.data()[b * k..(b + 1) * k];
            total += asl_value(&p, y.bits(), loss) + loss.otl_weight * otl_value(counts, y.z());
            let argmax = (0..k)
                .max_by(|&i, &j| counts[i].total_cmp(&counts[j]).then(j.cmp(&i)))
                .expect("non-empty");
            correct += usize::from(argmax == y.z());
            scores.extend(p);
        }
    }
    if !(total.is_finite() && scores.iter().all(|v| v.is_finite())) {
        return Err(Error::Divergence {
            epoch: 0,
            step: 0,
            loss: total as f64,
        });
    }
    let scores = Tensor::new(&[data.len(), n], scores)?;
    Ok(EvalResult {
        report: evaluate(&scores, &data.labels, threshold)?,
        loss: total / data.len() as Real,
        count_accuracy: correct as Real / data.len() as Real,
    })
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub step: u64,
    pub lr: Real,
    pub train_loss: Real,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval: Option<EvalResult>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val: Option<EvalResult>,
}

pub struct TrainOutcome {
    pub model: MlTr,
    pub optimizer: AdamW,
    pub records: Vec<EpochRecord>,
    /// Epochs completed, counting any resumed ones.
    pub epochs_done: usize,
    pub stopped_early: bool,
}

impl TrainOutcome {
    pub fn last_eval(&self) -> Option<&EvalResult> {
        self.records.iter().rev().find_map(|r| r.eval.as_ref())
    }
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

fn augment(images: &Tensor, size: usize, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    if size == 0 {
        return Ok(images.clone());
    }
    let s = images.shape().to_vec();
    let per = s[1] * s[2] * s[3];
    let mut out = Vec::with_capacity(images.numel());
    for b in 0..s[0] {
        let img = Tensor::new(&s[1..], images.data()[b * per..(b + 1) * per].to_vec())?;
        out.extend(cutout(&img, size, rng.random())?.into_data());
    }
    Ok(Tensor::new(&s, out)?)
}

/// Trains a fresh (or resumed) model on `data`.
pub fn train(cfg: &TrainConfig, data: &Dataset) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    if data.resolution != cfg.variant.resolution {
        return Err(Error::Config(format!(
            "data resolution {} does not match variant {}",
            data.resolution, cfg.variant
        )));
    }
    let (train_idx, val_idx) = if cfg.holdout {
        data.split(cfg.seed)
    } else {
        ((0..data.len()).collect(), Vec::new())
    };
    if train_idx.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    let train_set = data.subset(&train_idx);
    let val_set = (!val_idx.is_empty()).then(|| data.subset(&val_idx));

    let mut model = MlTr::new(cfg.variant.clone(), data.n_classes, cfg.seed)?;
    let mut opt = AdamW::new(&model.store, cfg.weight_decay);
    let mut start = 0;
    if let Some(path) = &cfg.resume {
        let ck = Checkpoint::load(path)?;
        ck.restore(&mut model, Some(&mut opt))?;
        start = ck.epoch;
        info!("resumed from {} after epoch {start}", path.display());
    }
    let steps_per_epoch = train_set.len().div_ceil(cfg.batch_size);
    let schedule = OneCycle {
        base: cfg.lr,
        total_steps: cfg.epochs * steps_per_epoch,
        warmup_frac: cfg.warmup_frac,
        floor_frac: cfg.floor_frac,
    };
    let mut log_file = match &cfg.log {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            let f = if cfg.resume.is_some() {
                fs::OpenOptions::new().append(true).create(true).open(p)
            } else {
                File::create(p)
            };
            Some(f.map_err(|e| Error::io(p, e))?)
        }
        None => None,
    };

    let mut records = Vec::new();
    let mut stopped_early = false;
    let mut epochs_done = start;
    for epoch in start..cfg.epochs {
        let mut rng = epoch_rng(cfg.seed, epoch);
        let mut order = train_idx.clone();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut lr = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let local: Vec<usize> = chunk
                .iter()
                .map(|i| train_idx.binary_search(i).expect("index from split"))
                .collect();
            let (images, labels) = train_set.batch(&local);
            let images = augment(&images, cfg.cutout, &mut rng)?;
            let step = opt.step as usize;
            lr = schedule.lr(step);
            let loss =
                train_step(&mut model, &mut opt, &images, &labels, &cfg.loss, lr).map_err(|e| {
                    match e {
                        Error::Divergence { loss, .. } => Error::Divergence {
                            epoch: epoch + 1,
                            step,
                            loss,
                        },
                        e => e,
                    }
                })?;
            loss_sum += loss * chunk.len() as Real;
        }
        epochs_done = epoch + 1;
        let mut rec = EpochRecord {
            epoch: epochs_done,
            step: opt.step,
            lr,
            train_loss: loss_sum / train_set.len() as Real,
            eval: None,
            val: None,
        };
        let evaluate_now = epochs_done % cfg.eval_every == 0 || epochs_done == cfg.epochs;
        if evaluate_now {
            let at_epoch = |e: Error| match e {
                Error::Divergence { loss, .. } => Error::Divergence {
                    epoch: epochs_done,
                    step: opt.step as usize,
                    loss,
                },
                e => e,
            };
            let ev = evaluate_model(&model, &train_set, &cfg.loss, cfg.batch_size, cfg.threshold)
                .map_err(at_epoch)?;
            if let Some(v) = &val_set {
                rec.val = Some(
                    evaluate_model(&model, v, &cfg.loss, cfg.batch_size, cfg.threshold)
                        .map_err(at_epoch)?,
                );
            }
            let map_ok = cfg.target_map.map(|t| ev.report.map >= t);
            let loss_ok = cfg.target_loss.map(|t| ev.loss < t);
            stopped_early = match (map_ok, loss_ok) {
                (None, None) => false,
                (a, b) => a.unwrap_or(true) && b.unwrap_or(true),
            };
            info!(
                "epoch {epochs_done}: train loss {:.5}, clean loss {:.5}, mAP {:.4}, count acc {:.3}",
                rec.train_loss, ev.loss, ev.report.map, ev.count_accuracy
            );
            rec.eval = Some(ev);
        } else {
            debug!("epoch {epochs_done}: train loss {:.5}", rec.train_loss);
        }
        if let Some(f) = log_file.as_mut() {
            let line = serde_json::to_string(&rec).expect("record serializes");
            writeln!(f, "{line}").map_err(|e| Error::io(cfg.log.as_ref().expect("log path"), e))?;
        }
        records.push(rec);
        if let Some(p) = &cfg.checkpoint {
            Checkpoint::capture(&model, Some(&opt), epochs_done).save(p)?;
        }
        if stopped_early {
            info!("targets reached after epoch {epochs_done}");
            break;
        }
    }
    Ok(TrainOutcome {
        model,
        optimizer: opt,
        records,
        epochs_done,
        stopped_early,
    })
}

/// Forward, backward and one optimizer update. Returns the batch loss.
pub fn train_step(
    model: &mut MlTr,
    opt: &mut AdamW,
    images: &Tensor,
    labels: &[LabelVector],
    loss: &LossConfig,
    lr: Real,
) -> Result<Real> {
    let mut tape = Tape::new();
    let p = model.store.bind(&mut tape, true)?;
    let x = tape.constant(images.shape(), images.data().to_vec())?;
    let out = model.forward(&mut tape, &p, x, loss.s)?;
    let parts = combined_loss(&mut tape, out.label_logits, out.count_logits, labels, loss)?;
    let value = tape.value(parts.total)[0];
    if !value.is_finite() {
        return Err(Error::Divergence {
            epoch: 0,
            step: opt.step as usize,
            loss: value as f64,
        });
    }
    let mut grads = tape.backward(parts.total)?;
    model.store.zero_grads();
    model.store.absorb_grads(&mut grads, &p)?;
    opt.update(&mut model.store, lr)?;
    let finite = model
        .store
        .params()
        .iter()
        .all(|p| p.tensor.data().iter().all(|v| v.is_finite()));
    if !finite {
        return Err(Error::Divergence {
            epoch: 0,
            step: opt.step as usize - 1,
            loss: Real::NAN as f64,
        });
    }
    Ok(value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, SynthSpec};

    fn small_data() -> Dataset {
        let mut spec = SynthSpec::new(3, 16, 1);
        spec.base_rates = vec![0.5; 3];
        generate(&spec, 6).unwrap()
    }

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            variant: VariantSpec::tiny(),
            epochs: 3,
            batch_size: 4,
            lr: 1e-3,
            ..Default::default()
        }
    }

    #[test]
    fn resume_reproduces_uninterrupted_run() {
        let data = small_data();
        let dir = tempfile::tempdir().unwrap();
        let full = train(&small_cfg(), &data).unwrap();

        let ck = dir.path().join("half.ckpt");
        let first = TrainConfig {
            epochs: 3,
            checkpoint: Some(ck.clone()),
            ..small_cfg()
        };
        // stop after two epochs by training a 2-epoch prefix of the same schedule
        let mut partial = first.clone();
        partial.target_loss = Some(Real::INFINITY);
        partial.eval_every = 2;
        let out = train(&partial, &data).unwrap();
        assert_eq!(out.epochs_done, 2);
        let resumed = train(
            &TrainConfig {
                resume: Some(ck),
                checkpoint: None,
                ..first
            },
            &data,
        )
        .unwrap();
        assert_eq!(resumed.model.store, full.model.store);
        assert_eq!(resumed.optimizer, full.optimizer);
    }

    #[test]
    fn divergence_keeps_last_checkpoint() {
        let data = small_data();
        let dir = tempfile::tempdir().unwrap();
        let ck = dir.path().join("a.ckpt");
        let cfg = TrainConfig {
            epochs: 1,
            checkpoint: Some(ck.clone()),
            ..small_cfg()
        };
        train(&cfg, &data).unwrap();
        let saved = fs::read(&ck).unwrap();
        let bad = TrainConfig {
            epochs: 2,
            lr: 1e30,
            resume: Some(ck.clone()),
            ..cfg
        };
        match train(&bad, &data) {
            Err(Error::Divergence { epoch, .. }) => assert_eq!(epoch, 2),
            other => panic!(
                "expected divergence, got {:?}",
                other.map(|o| o.epochs_done)
            ),
        }
        assert_eq!(fs::read(&ck).unwrap(), saved);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig {
            epochs: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            lr: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }
}
