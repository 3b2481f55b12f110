//! `key = value` configuration files.
//!
//! Blank lines and lines starting with `#` are ignored. Later assignments
//! (including command-line overrides) replace earlier ones. Recognised keys
//! are listed in [`KEYS`].

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use super::train::TrainConfig;
use crate::data::{generate, load_annotations, load_dataset, Dataset, SynthSpec};
use crate::error::{Error, Result};
use crate::model::VariantSpec;

/// Every accepted key with a one-line description.
pub const KEYS: &[(&str, &str)] = &[
    ("variant", "built-in variant: s, m, l, tiny, tiny32"),
    ("variant.resolution", "custom variant: input resolution"),
    ("variant.patch", "custom variant: patch size"),
    ("variant.channels", "custom variant: base channels"),
    ("variant.window", "custom variant: window size"),
    (
        "variant.blocks",
        "custom variant: four comma-separated block counts",
    ),
    ("data.source", "synth, dir or annotations"),
    ("data.count", "synth: number of samples"),
    ("data.classes", "synth: number of classes"),
    ("data.seed", "synth: generator seed"),
    (
        "data.preset",
        "synth: demo (similar pair and forced link) or plain",
    ),
    ("data.base_rate", "synth: base rate of every class"),
    ("data.dir", "dir: dataset directory written by synth-gen"),
    ("data.images", "annotations: image directory"),
    ("data.annotations", "annotations: JSON annotation file"),
    ("data.strict", "annotations: abort on the first issue"),
    ("epochs", "training epochs"),
    ("batch_size", "samples per step"),
    ("lr", "peak learning rate"),
    ("weight_decay", "decoupled weight decay"),
    ("warmup_frac", "fraction of steps spent warming up"),
    (
        "floor_frac",
        "initial and final learning rate as a fraction of lr",
    ),
    ("loss.s", "arc sigmoid scale"),
    ("loss.m", "negative probability margin"),
    ("loss.gamma_plus", "positive focusing exponent"),
    ("loss.gamma_minus", "negative focusing exponent"),
    ("loss.otl_weight", "weight of the object-count loss"),
    (
        "loss.strict_sign",
        "use the sigmoid sign exactly as typeset",
    ),
    ("seed", "model initialisation and shuffling seed"),
    ("cutout", "cutout square side, 0 disables"),
    ("holdout", "train on a 90% split and report the rest"),
    ("threshold", "score threshold for precision and recall"),
    ("eval_every", "epochs between evaluations"),
    ("target_map", "stop once train mAP reaches this value"),
    (
        "target_loss",
        "stop once clean train loss falls below this value",
    ),
    ("checkpoint", "checkpoint path written after every epoch"),
    ("log", "JSON-lines metric log path"),
    ("resume", "checkpoint to resume from"),
];

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Settings {
    values: BTreeMap<String, String>,
}

impl Settings {
    pub fn parse(text: &str) -> Result<Self> {
        let mut s = Self::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            s.set_pair(line)
                .map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        Ok(s)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Applies one `key=value` assignment.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("expected key=value, got `{pair}`")))?;
        self.set(k.trim(), v.trim())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if !KEYS.iter().any(|(k, _)| *k == key) {
            return Err(Error::Config(format!("unknown key `{key}`")));
        }
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    fn parse_or<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| Error::Config(format!("bad value `{v}` for `{key}`"))),
        }
    }

    fn opt<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        self.get(key)
            .map(|v| {
                v.parse()
                    .map_err(|_| Error::Config(format!("bad value `{v}` for `{key}`")))
            })
            .transpose()
    }

    pub fn variant(&self) -> Result<VariantSpec> {
        let base = VariantSpec::builtin(self.get("variant").unwrap_or("tiny32"))?;
        let custom = ["resolution", "patch", "channels", "window", "blocks"]
            .iter()
            .any(|k| self.get(&format!("variant.{k}")).is_some());
        if !custom {
            return Ok(base);
        }
        let blocks = match self.get("variant.blocks") {
            None => base.blocks,
            Some(v) => {
                let parts = v
                    .split(',')
                    .map(|p| p.trim().parse::<usize>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|_| Error::Config(format!("bad block counts `{v}`")))?;
                parts
                    .try_into()
                    .map_err(|_| Error::Config(format!("expected four block counts, got `{v}`")))?
            }
        };
        VariantSpec::new(
            "custom",
            self.parse_or("variant.resolution", base.resolution)?,
            self.parse_or("variant.patch", base.patch)?,
            self.parse_or("variant.channels", base.channels)?,
            self.parse_or("variant.window", base.window)?,
            blocks,
        )
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let d = TrainConfig::default();
        let l = d.loss.clone();
        let cfg = TrainConfig {
            variant: self.variant()?,
            epochs: self.parse_or("epochs", d.epochs)?,
            batch_size: self.parse_or("batch_size", d.batch_size)?,
            lr: self.parse_or("lr", d.lr)?,
            weight_decay: self.parse_or("weight_decay", d.weight_decay)?,
            warmup_frac: self.parse_or("warmup_frac", d.warmup_frac)?,
            floor_frac: self.parse_or("floor_frac", d.floor_frac)?,
            loss: crate::losses::LossConfig {
                s: self.parse_or("loss.s", l.s)?,
                m: self.parse_or("loss.m", l.m)?,
                gamma_plus: self.parse_or("loss.gamma_plus", l.gamma_plus)?,
                gamma_minus: self.parse_or("loss.gamma_minus", l.gamma_minus)?,
                otl_weight: self.parse_or("loss.otl_weight", l.otl_weight)?,
                strict_sign: self.parse_or("loss.strict_sign", l.strict_sign)?,
            },
            seed: self.parse_or("seed", d.seed)?,
            cutout: self.parse_or("cutout", d.cutout)?,
            holdout: self.parse_or("holdout", d.holdout)?,
            threshold: self.parse_or("threshold", d.threshold)?,
            eval_every: self.parse_or("eval_every", d.eval_every)?,
            target_map: self.opt("target_map")?,
            target_loss: self.opt("target_loss")?,
            checkpoint: self.opt::<PathBuf>("checkpoint")?,
            log: self.opt::<PathBuf>("log")?,
            resume: self.opt::<PathBuf>("resume")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Synthetic generator settings at the given canvas size.
    pub fn synth_spec(&self, canvas: usize) -> Result<SynthSpec> {
        let classes = self.parse_or("data.classes", 8usize)?;
        let seed = self.parse_or("data.seed", 0u64)?;
        let mut spec = SynthSpec::new(classes, canvas, seed);
        if let Some(rate) = self.opt::<f64>("data.base_rate")? {
            spec.base_rates = vec![rate as _; classes];
        }
        match self.get("data.preset").unwrap_or("demo") {
            "demo" => spec = spec.with_demo_structure(),
            "plain" => {}
            other => return Err(Error::Config(format!("unknown data.preset `{other}`"))),
        }
        spec.validate()?;
        Ok(spec)
    }

    /// Loads or generates the dataset described by the `data.*` keys.
    pub fn dataset(&self, resolution: usize) -> Result<Dataset> {
        match self.get("data.source").unwrap_or("synth") {
            "synth" => {
                let count = self.parse_or("data.count", 64usize)?;
                generate(&self.synth_spec(resolution)?, count)
            }
            "dir" => {
                let dir: PathBuf = self
                    .opt("data.dir")?
                    .ok_or_else(|| Error::Config("data.source=dir needs data.dir".into()))?;
                let (ds, _) = load_dataset(&dir)?;
                if ds.resolution != resolution {
                    return Err(Error::Config(format!(
                        "dataset resolution {} does not match variant resolution {resolution}",
                        ds.resolution
                    )));
                }
                Ok(ds)
            }
            "annotations" => {
                let images: PathBuf = self.opt("data.images")?.ok_or_else(|| {
                    Error::Config("data.source=annotations needs data.images".into())
                })?;
                let file: PathBuf = self.opt("data.annotations")?.ok_or_else(|| {
                    Error::Config("data.source=annotations needs data.annotations".into())
                })?;
                let strict = self.parse_or("data.strict", false)?;
                let (ds, report) = load_annotations(&images, &file, resolution, strict)?;
                if !report.issues.is_empty() {
                    log::warn!("{report}");
                }
                Ok(ds)
            }
            other => Err(Error::Config(format!("unknown data.source `{other}`"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_override_and_build() {
        let mut s = Settings::parse("# demo\nvariant = tiny\nepochs=5\n\nloss.s = 10\n").unwrap();
        s.set_pair("epochs=7").unwrap();
        let cfg = s.train_config().unwrap();
        assert_eq!(cfg.epochs, 7);
        assert_eq!(cfg.loss.s, 10.0);
        assert_eq!(cfg.variant, VariantSpec::tiny());
        assert!(s.set_pair("nonsense=1").is_err());
        assert!(Settings::parse("epochs").is_err());
        s.set("epochs", "many").unwrap();
        assert!(matches!(s.train_config(), Err(Error::Config(_))));
    }

    #[test]
    fn custom_variant_and_synth_data() {
        let s = Settings::parse(
            "variant=tiny\nvariant.blocks=1,2,1,1\ndata.count=3\ndata.classes=5\ndata.preset=plain",
        )
        .unwrap();
        let v = s.variant().unwrap();
        assert_eq!(v.blocks, [1, 2, 1, 1]);
        let ds = s.dataset(v.resolution).unwrap();
        assert_eq!((ds.len(), ds.n_classes, ds.resolution), (3, 5, 16));
        let bad = Settings::parse("variant.blocks=1,2").unwrap();
        assert!(bad.variant().is_err());
    }
}
