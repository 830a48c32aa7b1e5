//! On-disk dataset directories: `meta.json`, `images.bin`, optional `labels.bin`.
//!
//! Images are stored channel-last and row-major, either as `u8` (scaled by
//! 1/255 on load) or as little-endian `f32`. Labels are little-endian `i32`.

use std::fs;
use std::path::Path;

use ndarray::Array4;
use serde::{Deserialize, Serialize};

use super::{ImageTensor, LabeledDataset, UnlabeledDataset};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StorageDtype {
    U8,
    F32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub n: usize,
    pub w: usize,
    pub h: usize,
    pub c: usize,
    pub dtype: StorageDtype,
    pub labeled: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_classes: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Dataset {
    Labeled(LabeledDataset),
    Unlabeled(UnlabeledDataset),
}

impl Dataset {
    pub fn images(&self) -> &ImageTensor {
        match self {
            Dataset::Labeled(d) => &d.images,
            Dataset::Unlabeled(d) => &d.images,
        }
    }

    pub fn into_labeled(self) -> Option<LabeledDataset> {
        match self {
            Dataset::Labeled(d) => Some(d),
            Dataset::Unlabeled(_) => None,
        }
    }

    pub fn into_unlabeled(self) -> UnlabeledDataset {
        match self {
            Dataset::Labeled(d) => d.unlabeled(),
            Dataset::Unlabeled(d) => d,
        }
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|source| Error::Load { path: path.to_path_buf(), source })
}

fn corrupt(path: &Path, reason: impl Into<String>) -> Error {
    Error::Corrupt { path: path.to_path_buf(), reason: reason.into() }
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let meta_path = dir.join("meta.json");
    let meta: DatasetMeta =
        serde_json::from_slice(&read(&meta_path)?).map_err(|e| corrupt(&meta_path, format!("bad meta.json: {e}")))?;
    if meta.w == 0 || meta.h == 0 || meta.c == 0 {
        return Err(corrupt(&meta_path, "image dimensions must be positive"));
    }

    let images_path = dir.join("images.bin");
    let raw = read(&images_path)?;
    let count = meta.n * meta.w * meta.h * meta.c;
    let values: Vec<f32> = match meta.dtype {
        StorageDtype::U8 => {
            if raw.len() != count {
                return Err(corrupt(&images_path, format!("expected {count} bytes, found {}", raw.len())));
            }
            raw.iter().map(|&b| b as f32 / 255.0).collect()
        }
        StorageDtype::F32 => {
            if raw.len() != count * 4 {
                return Err(corrupt(&images_path, format!("expected {} bytes, found {}", count * 4, raw.len())));
            }
            raw.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect()
        }
    };
    if values.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
        return Err(corrupt(&images_path, "pixel values must be finite and within [0, 1]"));
    }
    let data = Array4::from_shape_vec((meta.n, meta.w, meta.h, meta.c), values)
        .map_err(|e| corrupt(&images_path, e.to_string()))?;
    let images = ImageTensor::new(data)?;

    if !meta.labeled {
        return Ok(Dataset::Unlabeled(UnlabeledDataset::new(images)));
    }
    let num_classes = meta.num_classes.ok_or_else(|| corrupt(&meta_path, "labeled dataset without num_classes"))?;
    let labels_path = dir.join("labels.bin");
    let raw = read(&labels_path)?;
    if raw.len() != meta.n * 4 {
        return Err(corrupt(&labels_path, format!("expected {} bytes, found {}", meta.n * 4, raw.len())));
    }
    let mut labels = Vec::with_capacity(meta.n);
    for b in raw.chunks_exact(4) {
        let v = i32::from_le_bytes([b[0], b[1], b[2], b[3]]);
        if v < 0 || v as usize >= num_classes {
            return Err(corrupt(&labels_path, format!("label {v} outside [0, {num_classes})")));
        }
        labels.push(v as u32);
    }
    Ok(Dataset::Labeled(LabeledDataset::new(images, labels, num_classes)?))
}

pub fn save_dataset(dir: impl AsRef<Path>, dataset: &Dataset, dtype: StorageDtype) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let images = dataset.images();
    let [w, h, c] = images.image_shape();
    let (labeled, num_classes) = match dataset {
        Dataset::Labeled(d) => (true, Some(d.num_classes)),
        Dataset::Unlabeled(_) => (false, None),
    };
    let meta = DatasetMeta { n: images.len(), w, h, c, dtype, labeled, num_classes };
    fs::write(dir.join("meta.json"), serde_json::to_vec_pretty(&meta)?)?;

    let std = images.as_array().as_standard_layout();
    let bytes: Vec<u8> = match dtype {
        StorageDtype::U8 => std.iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8).collect(),
        StorageDtype::F32 => std.iter().flat_map(|v| v.to_le_bytes()).collect(),
    };
    fs::write(dir.join("images.bin"), bytes)?;

    if let Dataset::Labeled(d) = dataset {
        save_labels(dir.join("labels.bin"), &d.labels)?;
    }
    Ok(())
}

/// Writes labels as a little-endian `i32` array.
pub fn save_labels(path: impl AsRef<Path>, labels: &[u32]) -> Result<()> {
    let bytes: Vec<u8> = labels.iter().flat_map(|&l| (l as i32).to_le_bytes()).collect();
    fs::write(path, bytes)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_raw(dir: &Path, meta: &str, images: &[u8], labels: Option<&[u8]>) {
        fs::write(dir.join("meta.json"), meta).unwrap();
        fs::write(dir.join("images.bin"), images).unwrap();
        if let Some(l) = labels {
            fs::write(dir.join("labels.bin"), l).unwrap();
        }
    }

    #[test]
    fn loads_u8_images_with_scaling() {
        let dir = tempfile::tempdir().unwrap();
        let mut bytes = vec![0u8; 16];
        bytes[3] = 255;
        write_raw(dir.path(), r#"{"n":4,"w":2,"h":2,"c":1,"dtype":"u8","labeled":false}"#, &bytes, None);
        let ds = load_dataset(dir.path()).unwrap();
        let images = ds.images();
        assert_eq!(images.len(), 4);
        assert_eq!(images.image_shape(), [2, 2, 1]);
        assert_eq!(images.view()[[0, 1, 1, 0]], 1.0);
    }

    #[test]
    fn truncated_images_are_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        write_raw(dir.path(), r#"{"n":4,"w":2,"h":2,"c":1,"dtype":"u8","labeled":false}"#, &[0u8; 15], None);
        assert!(matches!(load_dataset(dir.path()), Err(Error::Corrupt { .. })));
    }

    #[test]
    fn missing_files_are_load_errors() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Load { .. })));
        write_raw(dir.path(), r#"{"n":1,"w":1,"h":1,"c":1,"dtype":"u8","labeled":true,"num_classes":2}"#, &[0u8], None);
        assert!(matches!(load_dataset(dir.path()), Err(Error::Load { .. })));
    }

    #[test]
    fn labels_out_of_range_are_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        write_raw(
            dir.path(),
            r#"{"n":1,"w":1,"h":1,"c":1,"dtype":"u8","labeled":true,"num_classes":2}"#,
            &[0u8],
            Some(&5i32.to_le_bytes()),
        );
        assert!(matches!(load_dataset(dir.path()), Err(Error::Corrupt { .. })));
    }

    #[test]
    fn u8_round_trip_is_exact() {
        let data = Array4::from_shape_fn((3, 2, 2, 3), |(i, x, y, c)| ((i * 12 + x * 6 + y * 3 + c) as f32) / 255.0);
        let ds = Dataset::Labeled(LabeledDataset::new(ImageTensor::new(data).unwrap(), vec![0, 2, 1], 3).unwrap());
        let dir = tempfile::tempdir().unwrap();
        save_dataset(dir.path(), &ds, StorageDtype::U8).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back, ds);
    }
}
