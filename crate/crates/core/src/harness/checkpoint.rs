//! Binary checkpoint container. All integers and values are little-endian.
//!
//! ```text
//! magic        8 bytes  "MLTRCKPT"
//! version      u32      1
//! variant      str      VariantSpec as JSON
//! n_classes    u64
//! epoch        u64      epochs completed
//! n_params     u32
//! per param:   name str, ndim u32, dims u64 × ndim, dtype u8 (8 = f64), values
//! opt flag     u8       1 if optimizer state follows
//! opt step     u64
//! per param:   first moment values, second moment values (f64)
//! ```
//!
//! `str` is a u32 byte length followed by UTF-8 bytes.

use std::fs;
use std::path::Path;

use super::optim::AdamW;
use crate::error::{Error, Result};
use crate::model::{MlTr, VariantSpec};
use crate::tensor::Real;

pub const MAGIC: &[u8; 8] = b"MLTRCKPT";
pub const VERSION: u32 = 1;
const DTYPE_F64: u8 = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<Real>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<Vec<Real>>,
    pub v: Vec<Vec<Real>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub spec: VariantSpec,
    pub n_classes: usize,
    pub epoch: usize,
    pub params: Vec<ParamEntry>,
    pub optimizer: Option<OptimizerState>,
}

impl Checkpoint {
    pub fn capture(model: &MlTr, opt: Option<&AdamW>, epoch: usize) -> Self {
        Self {
            spec: model.spec.clone(),
            n_classes: model.n_classes,
            epoch,
            params: model
                .store
                .params()
                .iter()
                .map(|p| ParamEntry {
                    name: p.name.clone(),
                    shape: p.tensor.shape().to_vec(),
                    values: p.tensor.data().to_vec(),
                })
                .collect(),
            optimizer: opt.map(|o| OptimizerState {
                step: o.step,
                m: o.m.clone(),
                v: o.v.clone(),
            }),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_str(
            &mut out,
            &serde_json::to_string(&self.spec).expect("spec serializes"),
        );
        out.extend_from_slice(&(self.n_classes as u64).to_le_bytes());
        out.extend_from_slice(&(self.epoch as u64).to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for p in &self.params {
            put_str(&mut out, &p.name);
            out.extend_from_slice(&(p.shape.len() as u32).to_le_bytes());
            for &d in &p.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.push(DTYPE_F64);
            put_values(&mut out, &p.values);
        }
        match &self.optimizer {
            None => out.push(0),
            Some(o) => {
                out.push(1);
                out.extend_from_slice(&o.step.to_le_bytes());
                for (m, v) in o.m.iter().zip(&o.v) {
                    put_values(&mut out, m);
                    put_values(&mut out, v);
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version}"
            )));
        }
        let spec: VariantSpec = serde_json::from_str(&r.string()?)
            .map_err(|e| Error::Checkpoint(format!("bad variant record: {e}")))?;
        let n_classes = r.u64()? as usize;
        let epoch = r.u64()? as usize;
        let n = r.u32()? as usize;
        let mut params = Vec::with_capacity(n);
        for _ in 0..n {
            let name = r.string()?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let dtype = r.take(1)?[0];
            if dtype != DTYPE_F64 {
                return Err(Error::Checkpoint(format!("{name}: unknown dtype {dtype}")));
            }
            let values = r.values(shape.iter().product())?;
            params.push(ParamEntry {
                name,
                shape,
                values,
            });
        }
        let optimizer = match r.take(1)?[0] {
            0 => None,
            1 => {
                let step = r.u64()?;
                let mut m = Vec::with_capacity(n);
                let mut v = Vec::with_capacity(n);
                for p in &params {
                    m.push(r.values(p.values.len())?);
                    v.push(r.values(p.values.len())?);
                }
                Some(OptimizerState { step, m, v })
            }
            f => return Err(Error::Checkpoint(format!("bad optimizer flag {f}"))),
        };
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        Ok(Self {
            spec,
            n_classes,
            epoch,
            params,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        // write then rename so an interrupted save never truncates the old file
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Builds a model with the stored weights.
    pub fn to_model(&self) -> Result<MlTr> {
        let mut model = MlTr::new(self.spec.clone(), self.n_classes, 0)?;
        self.restore(&mut model, None)?;
        Ok(model)
    }

    /// Copies the stored weights (and optimizer state, when both exist) into
    /// `model`. The variant, class count and every parameter must match.
    pub fn restore(&self, model: &mut MlTr, opt: Option<&mut AdamW>) -> Result<()> {
        if self.spec != model.spec {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds variant {}, model is {}",
                self.spec, model.spec
            )));
        }
        if self.n_classes != model.n_classes {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} classes, model has {}",
                self.n_classes, model.n_classes
            )));
        }
        if self.params.len() != model.store.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} tensors, model has {}",
                self.params.len(),
                model.store.len()
            )));
        }
        for (e, p) in self.params.iter().zip(model.store.params()) {
            if e.name != p.name || e.shape != p.tensor.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {} {:?} does not match model tensor {} {:?}",
                    e.name,
                    e.shape,
                    p.name,
                    p.tensor.shape()
                )));
            }
        }
        for (e, p) in self.params.iter().zip(model.store.params_mut()) {
            p.tensor.data_mut().copy_from_slice(&e.values);
        }
        if let (Some(o), Some(state)) = (opt, &self.optimizer) {
            o.step = state.step;
            o.m = state.m.clone();
            o.v = state.v.clone();
        }
        Ok(())
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn put_values(out: &mut Vec<u8>, v: &[Real]) {
    for &x in v {
        out.extend_from_slice(&(x as f64).to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Checkpoint("invalid UTF-8 in name".into()))
    }

    fn values(&mut self, n: usize) -> Result<Vec<Real>> {
        let raw = self.take(
            n.checked_mul(8)
                .ok_or_else(|| Error::Checkpoint("size overflow".into()))?,
        )?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")) as Real)
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn save_load_save_is_byte_identical() {
        let model = MlTr::new(VariantSpec::tiny(), 4, 1).unwrap();
        let mut opt = AdamW::new(&model.store, 0.01);
        opt.step = 7;
        opt.m[0][0] = 0.25;
        let ck = Checkpoint::capture(&model, Some(&opt), 3);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ckpt");
        ck.save(&p).unwrap();
        let back = Checkpoint::load(&p).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), fs::read(&p).unwrap());

        let mut fresh = MlTr::new(VariantSpec::tiny(), 4, 99).unwrap();
        let mut fresh_opt = AdamW::new(&fresh.store, 0.01);
        back.restore(&mut fresh, Some(&mut fresh_opt)).unwrap();
        assert_eq!(fresh.store, model.store);
        assert_eq!(fresh_opt, opt);
    }

    #[test]
    fn mismatches_and_corruption_rejected() {
        let model = MlTr::new(VariantSpec::tiny(), 4, 1).unwrap();
        let ck = Checkpoint::capture(&model, None, 0);
        let mut other = MlTr::new(VariantSpec::tiny32(), 4, 1).unwrap();
        assert!(matches!(
            ck.restore(&mut other, None),
            Err(Error::Checkpoint(_))
        ));
        let mut fewer = MlTr::new(VariantSpec::tiny(), 3, 1).unwrap();
        assert!(ck.restore(&mut fewer, None).is_err());
        let bytes = ck.to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
    }
}
