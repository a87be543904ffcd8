//! Labeled image corpus with a three-way class split (seen classes for
//! meta-training, seen classes for validation, unseen classes for meta-test)
//! and manifest-based ingestion.
//!
//! Manifest format: JSON lines, one record per image,
//! `{"path": string, "label": string, "split": "train"|"val"|"test"}`.
//! Paths are resolved relative to the manifest's directory. The three
//! splits must have pairwise disjoint label sets, and every image must share
//! one (C, H, W) size.

use super::netpbm;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    #[serde(rename = "train")]
    Train,
    #[serde(rename = "val")]
    Val,
    #[serde(rename = "test")]
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    fn index(self) -> usize {
        match self {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        }
    }
}

#[derive(Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct ManifestRecord {
    path: String,
    label: String,
    split: Split,
}

/// An immutable labeled image corpus. Class ids are dense, assigned by
/// first occurrence in the manifest (or generation) order.
#[derive(Debug)]
pub struct LabeledDataset {
    images: Vec<Tensor<f32>>,
    labels: Vec<usize>,
    splits: Vec<Split>,
    class_names: Vec<String>,
    /// class id → sample ids, ascending.
    class_samples: Vec<Vec<usize>>,
    /// split → class ids present, ascending.
    split_classes: [Vec<usize>; 3],
    image_shape: Vec<usize>,
}

impl LabeledDataset {
    /// Assemble a dataset from parallel image/label-name/split lists,
    /// enforcing the shared-size and disjoint-split invariants.
    pub fn from_parts(
        images: Vec<Tensor<f32>>,
        label_names: Vec<String>,
        splits: Vec<Split>,
    ) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::Ingestion {
                record: "<dataset>".into(),
                message: "dataset holds no images".into(),
            });
        }
        if images.len() != label_names.len() || images.len() != splits.len() {
            return Err(Error::Contract(format!(
                "parallel lists disagree: {} images, {} labels, {} splits",
                images.len(),
                label_names.len(),
                splits.len()
            )));
        }
        let image_shape = images[0].shape().to_vec();
        for (i, img) in images.iter().enumerate() {
            if img.shape() != image_shape.as_slice() {
                return Err(Error::Ingestion {
                    record: format!("image {i}"),
                    message: format!(
                        "size {:?} differs from first image {:?} (resize is unsupported)",
                        img.shape(),
                        image_shape
                    ),
                });
            }
        }
        let mut class_names: Vec<String> = Vec::new();
        let mut labels = Vec::with_capacity(label_names.len());
        for name in &label_names {
            let id = match class_names.iter().position(|n| n == name) {
                Some(id) => id,
                None => {
                    class_names.push(name.clone());
                    class_names.len() - 1
                }
            };
            labels.push(id);
        }
        let mut class_samples = vec![Vec::new(); class_names.len()];
        let mut class_split: Vec<Option<Split>> = vec![None; class_names.len()];
        for (sample, (&label, &split)) in labels.iter().zip(&splits).enumerate() {
            class_samples[label].push(sample);
            match class_split[label] {
                None => class_split[label] = Some(split),
                Some(existing) if existing == split => {}
                Some(existing) => {
                    return Err(Error::Ingestion {
                        record: format!("class '{}'", class_names[label]),
                        message: format!(
                            "appears in both '{}' and '{}' splits; split class sets must be disjoint",
                            existing.name(),
                            split.name()
                        ),
                    });
                }
            }
        }
        let mut split_classes: [Vec<usize>; 3] = [Vec::new(), Vec::new(), Vec::new()];
        for (class, split) in class_split.iter().enumerate() {
            let split = split.expect("every class has at least one sample");
            split_classes[split.index()].push(class);
        }
        Ok(LabeledDataset {
            images,
            labels,
            splits,
            class_names,
            class_samples,
            split_classes,
            image_shape,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn image(&self, sample: usize) -> &Tensor<f32> {
        &self.images[sample]
    }

    pub fn label(&self, sample: usize) -> usize {
        self.labels[sample]
    }

    pub fn split_of(&self, sample: usize) -> Split {
        self.splits[sample]
    }

    pub fn class_count(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_name(&self, class: usize) -> &str {
        &self.class_names[class]
    }

    /// Sample ids of one class, ascending.
    pub fn class_samples(&self, class: usize) -> &[usize] {
        &self.class_samples[class]
    }

    /// Class ids present in a split, ascending.
    pub fn split_classes(&self, split: Split) -> &[usize] {
        &self.split_classes[split.index()]
    }

    /// Shared (C, H, W) of every image.
    pub fn image_shape(&self) -> &[usize] {
        &self.image_shape
    }

    /// Stack the given samples into a (B, C, H, W) batch.
    pub fn stack(&self, samples: &[usize]) -> Tensor<f32> {
        let per = self.image_shape.iter().product::<usize>();
        let mut data = Vec::with_capacity(samples.len() * per);
        for &s in samples {
            data.extend_from_slice(self.images[s].data());
        }
        let mut shape = vec![samples.len()];
        shape.extend_from_slice(&self.image_shape);
        Tensor::new(shape, data).expect("stacked shape is consistent")
    }
}

/// Load a dataset from a JSON-lines manifest. Image paths are resolved
/// relative to the manifest's directory.
pub fn load_dataset(manifest_path: &Path) -> Result<LabeledDataset> {
    let file = std::fs::File::open(manifest_path).map_err(|e| Error::Ingestion {
        record: manifest_path.display().to_string(),
        message: format!("cannot open manifest: {e}"),
    })?;
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let mut images = Vec::new();
    let mut label_names = Vec::new();
    let mut splits = Vec::new();
    for (line_index, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line_no = line_index + 1;
        let record_tag = || format!("{}:{line_no}", manifest_path.display());
        let line = line.map_err(|e| Error::Ingestion {
            record: record_tag(),
            message: format!("cannot read line: {e}"),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let record: ManifestRecord =
            serde_json::from_str(&line).map_err(|e| Error::Ingestion {
                record: record_tag(),
                message: format!("malformed record: {e}"),
            })?;
        let image_path = base.join(&record.path);
        let image = netpbm::read_image(&image_path).map_err(|e| match e {
            Error::Ingestion { message, .. } => Error::Ingestion {
                record: format!("{} ({})", record_tag(), record.path),
                message,
            },
            other => other,
        })?;
        images.push(image);
        label_names.push(record.label);
        splits.push(record.split);
    }
    let dataset = LabeledDataset::from_parts(images, label_names, splits)?;
    Ok(dataset)
}

/// Write a dataset to `dir` as one PGM/PPM file per image plus
/// `manifest.jsonl`; returns the manifest path. Inverse of `load_dataset`
/// for byte-quantized pixel values.
pub fn write_dataset(dataset: &LabeledDataset, dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let manifest_path = dir.join("manifest.jsonl");
    let mut manifest = std::fs::File::create(&manifest_path)
        .map_err(|e| Error::io(manifest_path.display().to_string(), e))?;
    let ext = if dataset.image_shape()[0] == 3 {
        "ppm"
    } else {
        "pgm"
    };
    let digits = dataset.len().to_string().len().max(4);
    for sample in 0..dataset.len() {
        let name = format!("img_{sample:0digits$}.{ext}");
        netpbm::write_image(&dir.join(&name), dataset.image(sample))?;
        let record = ManifestRecord {
            path: name,
            label: dataset.class_name(dataset.label(sample)).to_string(),
            split: dataset.split_of(sample),
        };
        let line = serde_json::to_string(&record)
            .map_err(|e| Error::Ingestion {
                record: format!("sample {sample}"),
                message: format!("cannot serialize record: {e}"),
            })?;
        writeln!(manifest, "{line}")
            .map_err(|e| Error::io(manifest_path.display().to_string(), e))?;
    }
    Ok(manifest_path)
}
