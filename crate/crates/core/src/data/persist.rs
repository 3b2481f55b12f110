//! Directory layout of a stored dataset:
//!
//! ```text
//! manifest.txt      header lines, then one `sample <file> <bits>` line per sample
//! 00000.bin         image [3, R, R] as little-endian f64, channel-major
//! ```
//!
//! Header lines, in order: `mltr-dataset 1`, `resolution <R>`,
//! `classes <n>`, `count <N>`, `spec <json | none>`. The bit string has one
//! `0`/`1` per class.

use std::fs;
use std::path::Path;

use super::synth::SynthSpec;
use super::Dataset;
use crate::error::{Error, Result};
use crate::labels::LabelVector;
use crate::tensor::{Real, Tensor};

pub const MANIFEST: &str = "manifest.txt";
const MAGIC: &str = "mltr-dataset 1";

pub fn save_dataset(dir: &Path, ds: &Dataset, spec: Option<&SynthSpec>) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = format!(
        "{MAGIC}\nresolution {}\nclasses {}\ncount {}\n",
        ds.resolution,
        ds.n_classes,
        ds.len()
    );
    match spec {
        Some(s) => {
            manifest.push_str("spec ");
            manifest.push_str(&serde_json::to_string(s).expect("spec serializes"));
            manifest.push('\n');
        }
        None => manifest.push_str("spec none\n"),
    }
    for (i, (img, y)) in ds.images.iter().zip(&ds.labels).enumerate() {
        let name = format!("{i:05}.bin");
        let bytes: Vec<u8> = img
            .data()
            .iter()
            .flat_map(|&v| (v as f64).to_le_bytes())
            .collect();
        let path = dir.join(&name);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        manifest.push_str(&format!("sample {name} {}\n", y.to_bit_string()));
    }
    let path = dir.join(MANIFEST);
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))
}

pub fn load_dataset(dir: &Path) -> Result<(Dataset, Option<SynthSpec>)> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let bad = |line: usize, m: &str| Error::Data(format!("{}:{}: {m}", path.display(), line + 1));
    let mut lines = text.lines().enumerate();
    let mut header = |key: &str| -> Result<String> {
        let (i, l) = lines.next().ok_or_else(|| bad(0, "truncated manifest"))?;
        if key.is_empty() {
            return Ok(l.to_string());
        }
        l.strip_prefix(key)
            .and_then(|r| r.strip_prefix(' '))
            .map(str::to_string)
            .ok_or_else(|| bad(i, &format!("expected `{key} ...`")))
    };
    if header("")? != MAGIC {
        return Err(bad(0, "not a dataset manifest"));
    }
    let num = |s: String, what: &str| {
        s.trim()
            .parse::<usize>()
            .map_err(|_| Error::Data(format!("{}: bad {what} `{s}`", path.display())))
    };
    let resolution = num(header("resolution")?, "resolution")?;
    let n_classes = num(header("classes")?, "class count")?;
    let count = num(header("count")?, "sample count")?;
    let spec_text = header("spec")?;
    let spec = if spec_text == "none" {
        None
    } else {
        Some(
            serde_json::from_str(&spec_text)
                .map_err(|e| Error::Data(format!("{}: bad spec: {e}", path.display())))?,
        )
    };
    let mut ds = Dataset::new(resolution, n_classes);
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        let [tag, file, bits] = parts[..] else {
            return Err(bad(i, "expected `sample <file> <bits>`"));
        };
        if tag != "sample" {
            return Err(bad(i, "expected `sample <file> <bits>`"));
        }
        let y = LabelVector::parse_bit_string(bits).ok_or_else(|| bad(i, "bad label bits"))?;
        let fpath = dir.join(file);
        let bytes = fs::read(&fpath).map_err(|e| Error::io(&fpath, e))?;
        if bytes.len() != 8 * 3 * resolution * resolution {
            return Err(Error::Data(format!(
                "{}: expected {} bytes, found {}",
                fpath.display(),
                8 * 3 * resolution * resolution,
                bytes.len()
            )));
        }
        let data: Vec<Real> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")) as Real)
            .collect();
        ds.push(Tensor::new(&[3, resolution, resolution], data)?, y)
            .map_err(|e| bad(i, &e.to_string()))?;
    }
    if ds.len() != count {
        return Err(Error::Data(format!(
            "{}: header promises {count} samples, found {}",
            path.display(),
            ds.len()
        )));
    }
    Ok((ds, spec))
}
