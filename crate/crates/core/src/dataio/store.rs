//! Dataset directory layout:
//!
//! ```text
//! meta.json                  config, shapes, per-split sample ids
//! train_images.bin           f32 little-endian [N, C, H, W]
//! train_labels.csv           sample_id,l0,...,l{L-1}
//! val_images.bin / val_labels.csv
//! unlabeled_images.bin       images only
//! eval/unlabeled_labels.csv  held back for evaluation
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::audit;
use super::{LabelMatrix, LabeledDataset, Split, SyntheticDataset};
use crate::error::{Error, Result};
use crate::nncore::Tensor;

pub const EVAL_LABELS: &str = "eval/unlabeled_labels.csv";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitMeta {
    pub split: Split,
    pub sample_ids: Vec<usize>,
    pub images: String,
    pub labels: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub label_count: usize,
    /// `[C, H, W]`.
    pub image_shape: [usize; 3],
    pub splits: Vec<SplitMeta>,
    /// Generator settings, absent for ingested datasets.
    pub generator: Option<super::SyntheticDatasetConfig>,
}

impl DatasetMeta {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("meta.json");
        if !path.exists() {
            return Err(Error::MissingArtifact {
                path,
                hint: "generate the dataset first (gen-data)".into(),
            });
        }
        Ok(serde_json::from_str(&audit::read_string(&path)?)?)
    }

    fn split(&self, split: Split) -> Result<&SplitMeta> {
        self.splits
            .iter()
            .find(|s| s.split == split)
            .ok_or_else(|| Error::Dataset(format!("dataset has no {} split", split.name())))
    }
}

pub fn eval_labels_path(dir: &Path) -> PathBuf {
    dir.join(EVAL_LABELS)
}

fn write_images(path: &Path, images: &Tensor) -> Result<()> {
    let bytes: Vec<u8> = images.data().iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn write_labels(path: &Path, ids: &[usize], labels: &LabelMatrix) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["sample_id".to_string()];
    header.extend((0..labels.cols).map(|j| format!("l{j}")));
    w.write_record(&header)?;
    for (r, id) in ids.iter().enumerate() {
        let mut row = vec![id.to_string()];
        row.extend((0..labels.cols).map(|c| labels.get(r, c).to_string()));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a `sample_id,l0..` file. Returns ids and the label matrix.
pub fn read_labels(path: &Path) -> Result<(Vec<usize>, LabelMatrix)> {
    let mut r = csv::Reader::from_reader(audit::open(path)?);
    let cols = r.headers()?.len().saturating_sub(1);
    let mut ids = Vec::new();
    let mut data = Vec::new();
    for (row, rec) in r.records().enumerate() {
        let rec = rec?;
        let id = rec[0]
            .trim()
            .parse()
            .map_err(|_| Error::Dataset(format!("{}: bad sample id '{}'", path.display(), &rec[0])))?;
        ids.push(id);
        for (c, v) in rec.iter().skip(1).enumerate() {
            let v: f64 = v.trim().parse().map_err(|_| {
                Error::Dataset(format!("{}: row {row} column {c} is not a number", path.display()))
            })?;
            if v != 0.0 && v != 1.0 {
                return Err(Error::InvalidLabel {
                    sample: row,
                    task: c,
                    value: v,
                });
            }
            data.push(v as u8);
        }
    }
    let labels = LabelMatrix::new(ids.len(), cols, data)?;
    Ok((ids, labels))
}

pub fn write_dataset_parts(
    dir: &Path,
    meta_generator: Option<super::SyntheticDatasetConfig>,
    label_count: usize,
    splits: &[&LabeledDataset],
    eval_labels: Option<&LabelMatrix>,
) -> Result<DatasetMeta> {
    fs::create_dir_all(dir.join("eval")).map_err(|e| Error::io(dir, e))?;
    let first = splits
        .first()
        .ok_or_else(|| Error::Dataset("no splits to write".into()))?;
    let [_, c, h, w] = <[usize; 4]>::try_from(first.images.shape())
        .map_err(|_| Error::shape("dataset images", &[0, 0, 0, 0], first.images.shape()))?;
    let mut metas = Vec::new();
    for ds in splits {
        let name = ds.split.name();
        let images = format!("{name}_images.bin");
        write_images(&dir.join(&images), &ds.images)?;
        let labels = match &ds.labels {
            Some(l) => {
                let file = format!("{name}_labels.csv");
                write_labels(&dir.join(&file), &ds.sample_ids, l)?;
                Some(file)
            }
            None => None,
        };
        metas.push(SplitMeta {
            split: ds.split,
            sample_ids: ds.sample_ids.clone(),
            images,
            labels,
        });
    }
    if let Some(eval) = eval_labels {
        let unlabeled = splits
            .iter()
            .find(|s| s.split == Split::Unlabeled)
            .ok_or_else(|| Error::Dataset("evaluation labels without an unlabeled split".into()))?;
        write_labels(&eval_labels_path(dir), &unlabeled.sample_ids, eval)?;
    }
    let meta = DatasetMeta {
        label_count,
        image_shape: [c, h, w],
        splits: metas,
        generator: meta_generator,
    };
    let path = dir.join("meta.json");
    fs::write(&path, serde_json::to_string_pretty(&meta)?).map_err(|e| Error::io(&path, e))?;
    Ok(meta)
}

pub fn save_dataset(dir: &Path, data: &SyntheticDataset) -> Result<DatasetMeta> {
    write_dataset_parts(
        dir,
        Some(data.config.clone()),
        data.config.label_count,
        &[&data.train, &data.val, &data.unlabeled],
        Some(&data.eval_labels),
    )
}

/// Loads one split. Never touches the evaluation-label file.
pub fn load_split(dir: &Path, split: Split) -> Result<LabeledDataset> {
    let meta = DatasetMeta::load(dir)?;
    let sm = meta.split(split)?;
    let path = dir.join(&sm.images);
    let bytes = audit::read_bytes(&path)?;
    let [c, h, w] = meta.image_shape;
    let n = sm.sample_ids.len();
    if bytes.len() != n * c * h * w * 4 {
        return Err(Error::Dataset(format!(
            "{}: expected {} bytes, found {}",
            path.display(),
            n * c * h * w * 4,
            bytes.len()
        )));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    let images = Tensor::new(&[n, c, h, w], data)?;
    let labels = match (&sm.labels, split) {
        (Some(file), Split::Train | Split::Val) => {
            let (ids, labels) = read_labels(&dir.join(file))?;
            if ids != sm.sample_ids {
                return Err(Error::Dataset(format!("{file}: sample ids disagree with meta.json")));
            }
            Some(labels)
        }
        _ => None,
    };
    Ok(LabeledDataset {
        split,
        sample_ids: sm.sample_ids.clone(),
        images,
        labels,
    })
}

/// Held-back labels of the unlabeled split, for evaluation only.
pub fn load_eval_labels(dir: &Path) -> Result<LabelMatrix> {
    let meta = DatasetMeta::load(dir)?;
    let path = eval_labels_path(dir);
    if !path.exists() {
        return Err(Error::MissingArtifact {
            path,
            hint: "evaluation labels are written by gen-data".into(),
        });
    }
    let (ids, labels) = read_labels(&path)?;
    if ids != meta.split(Split::Unlabeled)?.sample_ids {
        return Err(Error::Dataset("evaluation labels do not match the unlabeled split".into()));
    }
    Ok(labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{generate_dataset, SyntheticDatasetConfig};

    #[test]
    fn round_trip_and_segregation() {
        let dir = tempfile::tempdir().unwrap();
        let d = generate_dataset(&SyntheticDatasetConfig {
            image_size: 8,
            ..SyntheticDatasetConfig::new(3, 20, 10, 5)
        })
        .unwrap();
        save_dataset(dir.path(), &d).unwrap();
        let rec = audit::AccessRecorder::start();
        assert_eq!(load_split(dir.path(), Split::Train).unwrap(), d.train);
        assert_eq!(load_split(dir.path(), Split::Val).unwrap(), d.val);
        assert_eq!(load_split(dir.path(), Split::Unlabeled).unwrap(), d.unlabeled);
        assert!(!rec.opened(&eval_labels_path(dir.path())));
        assert_eq!(load_eval_labels(dir.path()).unwrap(), d.eval_labels);
        assert!(rec.opened(&eval_labels_path(dir.path())));
    }

    #[test]
    fn missing_dataset_is_a_missing_artifact() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_split(dir.path(), Split::Train),
            Err(Error::MissingArtifact { .. })
        ));
    }
}
