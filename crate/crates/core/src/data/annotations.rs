//! Reader for detection-style annotation files:
//!
//! ```json
//! {
//!   "images":      [{"id": 1, "file_name": "a.png"}],
//!   "annotations": [{"image_id": 1, "category_id": 18}],
//!   "categories":  [{"id": 18, "name": "dog"}]
//! }
//! ```
//!
//! Categories map to class indices in order of increasing id. Extra fields
//! (boxes, areas, ...) are ignored.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::path::Path;

use serde::Serialize;
use serde_json::Value;

use super::imageops::{decode_image, resize_bilinear};
use super::Dataset;
use crate::error::{Error, Result};
use crate::labels::LabelVector;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum IssueKind {
    MissingImage,
    UndecodableImage,
    UnknownCategory,
    MalformedRecord,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct LoadIssue {
    pub kind: IssueKind,
    pub detail: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct LoadReport {
    pub images_loaded: usize,
    pub annotations_used: usize,
    /// Category names in class-index order.
    pub categories: Vec<String>,
    pub issues: Vec<LoadIssue>,
}

impl fmt::Display for LoadReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "loaded {} images, {} annotations, {} categories, {} issues",
            self.images_loaded,
            self.annotations_used,
            self.categories.len(),
            self.issues.len()
        )?;
        for i in &self.issues {
            writeln!(f, "  {:?}: {}", i.kind, i.detail)?;
        }
        Ok(())
    }
}

struct Collector {
    strict: bool,
    issues: Vec<LoadIssue>,
}

impl Collector {
    fn note(&mut self, kind: IssueKind, detail: String) -> Result<()> {
        if self.strict {
            return Err(Error::Data(format!("{kind:?}: {detail}")));
        }
        self.issues.push(LoadIssue { kind, detail });
        Ok(())
    }
}

fn field_u64(v: &Value, key: &str) -> Option<u64> {
    v.get(key).and_then(Value::as_u64)
}

/// Loads every listed image, resized to `resolution`, with multi-hot labels.
/// Problems are collected in the report; with `strict` the first one aborts.
pub fn load_annotations(
    images_dir: &Path,
    annotation_file: &Path,
    resolution: usize,
    strict: bool,
) -> Result<(Dataset, LoadReport)> {
    let text = fs::read_to_string(annotation_file).map_err(|e| Error::io(annotation_file, e))?;
    let root: Value = serde_json::from_str(&text)
        .map_err(|e| Error::Data(format!("{}: {e}", annotation_file.display())))?;
    let list = |key: &str| -> Result<&Vec<Value>> {
        root.get(key).and_then(Value::as_array).ok_or_else(|| {
            Error::Data(format!(
                "{}: missing `{key}` array",
                annotation_file.display()
            ))
        })
    };
    let mut col = Collector {
        strict,
        issues: Vec::new(),
    };

    let mut cats: BTreeMap<u64, String> = BTreeMap::new();
    for (i, c) in list("categories")?.iter().enumerate() {
        match field_u64(c, "id") {
            Some(id) => {
                let name = c
                    .get("name")
                    .and_then(Value::as_str)
                    .unwrap_or("")
                    .to_string();
                cats.insert(id, name);
            }
            None => col.note(
                IssueKind::MalformedRecord,
                format!("category #{i} has no integer id"),
            )?,
        }
    }
    let class_of: HashMap<u64, usize> = cats.keys().enumerate().map(|(i, &id)| (id, i)).collect();
    let n = cats.len();
    if n == 0 {
        return Err(Error::Data(format!(
            "{}: no categories defined",
            annotation_file.display()
        )));
    }

    let mut images: Vec<(u64, String)> = Vec::new();
    for (i, img) in list("images")?.iter().enumerate() {
        match (
            field_u64(img, "id"),
            img.get("file_name").and_then(Value::as_str),
        ) {
            (Some(id), Some(f)) => images.push((id, f.to_string())),
            _ => col.note(
                IssueKind::MalformedRecord,
                format!("image #{i} needs an integer `id` and a `file_name`"),
            )?,
        }
    }
    let mut labels: HashMap<u64, LabelVector> = images
        .iter()
        .map(|(id, _)| (*id, LabelVector::new(n)))
        .collect();

    let mut used = 0;
    let empty = Vec::new();
    let anns = root
        .get("annotations")
        .and_then(Value::as_array)
        .unwrap_or(&empty);
    for (i, a) in anns.iter().enumerate() {
        let (Some(img), Some(cat)) = (field_u64(a, "image_id"), field_u64(a, "category_id")) else {
            col.note(
                IssueKind::MalformedRecord,
                format!("annotation #{i} needs integer `image_id` and `category_id`"),
            )?;
            continue;
        };
        let Some(&class) = class_of.get(&cat) else {
            col.note(
                IssueKind::UnknownCategory,
                format!("annotation #{i} uses category {cat}"),
            )?;
            continue;
        };
        match labels.get_mut(&img) {
            Some(y) => {
                y.set(class);
                used += 1;
            }
            None => col.note(
                IssueKind::MalformedRecord,
                format!("annotation #{i} refers to unknown image {img}"),
            )?,
        }
    }

    let mut ds = Dataset::new(resolution, n);
    for (id, file) in &images {
        let path = images_dir.join(file);
        if !path.is_file() {
            col.note(IssueKind::MissingImage, format!("{}", path.display()))?;
            continue;
        }
        let img = match decode_image(&path) {
            Ok(t) => t,
            Err(e) => {
                col.note(IssueKind::UndecodableImage, e.to_string())?;
                continue;
            }
        };
        let img = resize_bilinear(&img, resolution, resolution)?;
        ds.push(img, labels[id].clone())?;
    }
    let report = LoadReport {
        images_loaded: ds.len(),
        annotations_used: used,
        categories: cats.into_values().collect(),
        issues: col.issues,
    };
    Ok((ds, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::imageops::save_rgb_png;
    use crate::tensor::Tensor;

    fn write_ppm(path: &Path, value: u8) {
        let mut bytes = b"P6\n2 2\n255\n".to_vec();
        bytes.extend(std::iter::repeat_n(value, 12));
        fs::write(path, bytes).unwrap();
    }

    fn fixture(dir: &Path, annotations: &str) -> std::path::PathBuf {
        write_ppm(&dir.join("a.ppm"), 10);
        write_ppm(&dir.join("b.ppm"), 200);
        save_rgb_png(&dir.join("c.png"), &Tensor::full(&[3, 3, 3], 0.5)).unwrap();
        let json = format!(
            r#"{{"images": [{{"id": 1, "file_name": "a.ppm"}}, {{"id": 2, "file_name": "b.ppm"}},
                {{"id": 3, "file_name": "c.png"}}],
               "annotations": {annotations},
               "categories": [{{"id": 7, "name": "cat"}}, {{"id": 3, "name": "dog"}}, {{"id": 9, "name": "owl"}}]}}"#
        );
        let p = dir.join("ann.json");
        fs::write(&p, json).unwrap();
        p
    }

    #[test]
    fn three_image_fixture() {
        let dir = tempfile::tempdir().unwrap();
        let ann = fixture(
            dir.path(),
            r#"[{"image_id": 1, "category_id": 7}, {"image_id": 1, "category_id": 9},
                {"image_id": 2, "category_id": 3}, {"image_id": 2, "category_id": 3, "bbox": [0, 0, 1, 1]}]"#,
        );
        let (ds, report) = load_annotations(dir.path(), &ann, 4, true).unwrap();
        assert_eq!(report.categories, vec!["dog", "cat", "owl"]);
        let bits: Vec<String> = ds.labels.iter().map(LabelVector::to_bit_string).collect();
        assert_eq!(bits, vec!["011", "100", "000"]);
        assert_eq!(ds.labels[2].z(), 0);
        assert_eq!(ds.images[0].shape(), &[3, 4, 4]);
        assert!((ds.images[1].data()[0] - 200.0 / 255.0).abs() < 1e-12);
        assert!(report.issues.is_empty());
    }

    #[test]
    fn issues_are_itemized_or_fatal_in_strict_mode() {
        let dir = tempfile::tempdir().unwrap();
        let ann = fixture(
            dir.path(),
            r#"[{"image_id": 1, "category_id": 42}, {"image_id": 1}, {"image_id": 8, "category_id": 7}]"#,
        );
        fs::remove_file(dir.path().join("b.ppm")).unwrap();
        let (ds, report) = load_annotations(dir.path(), &ann, 4, false).unwrap();
        assert_eq!(ds.len(), 2);
        let kinds: Vec<IssueKind> = report.issues.iter().map(|i| i.kind).collect();
        assert_eq!(
            kinds,
            vec![
                IssueKind::UnknownCategory,
                IssueKind::MalformedRecord,
                IssueKind::MalformedRecord,
                IssueKind::MissingImage
            ]
        );
        assert!(report.to_string().contains("4 issues"));
        assert!(matches!(
            load_annotations(dir.path(), &ann, 4, true),
            Err(Error::Data(_))
        ));
    }
}
