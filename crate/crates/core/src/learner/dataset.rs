//! On-disk image datasets.
//!
//! A dataset directory holds IDX files (the MNIST container format) and a
//! `manifest.json`:
//!
//! ```json
//! {
//!   "n_items": 2000,
//!   "batch_size": 100,
//!   "train_images": "train-images-idx3-ubyte",
//!   "train_labels": "train-labels-idx1-ubyte",
//!   "val_images": "val-images-idx3-ubyte",
//!   "val_labels": "val-labels-idx1-ubyte",
//!   "item_order": null
//! }
//! ```
//!
//! `item_order`, when present, is a permutation of `0..n_items` that fixes
//! which items form each batch and their order inside it: batch `k` is
//! `item_order[k * batch_size..(k + 1) * batch_size]`. When absent, file order
//! is used. Either way the within-batch order never changes afterwards.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TsoError};
use crate::strategy::compute_strategy_length;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub n_items: usize,
    pub batch_size: usize,
    pub train_images: String,
    pub train_labels: String,
    pub val_images: String,
    pub val_labels: String,
    #[serde(default)]
    pub item_order: Option<Vec<usize>>,
}

/// Images scaled to `[0, 1]`, one row per item, plus the fixed batching.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub train_images: Array2<f32>,
    pub train_labels: Vec<u8>,
    pub val_images: Array2<f32>,
    pub val_labels: Vec<u8>,
    pub n_classes: usize,
    batch_size: usize,
    item_order: Vec<usize>,
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Self> {
        let err = |path: &Path, message: String| TsoError::Dataset {
            path: path.to_path_buf(),
            message,
        };
        let manifest_path = dir.join("manifest.json");
        let text = fs::read_to_string(&manifest_path).map_err(|e| err(&manifest_path, e.to_string()))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| err(&manifest_path, e.to_string()))?;

        let (train_images, train_labels) =
            read_pair(&dir.join(&manifest.train_images), &dir.join(&manifest.train_labels))?;
        let (val_images, val_labels) = read_pair(&dir.join(&manifest.val_images), &dir.join(&manifest.val_labels))?;
        if train_images.ncols() != val_images.ncols() {
            return Err(err(dir, "train and validation images differ in size".into()));
        }
        if manifest.n_items == 0 || manifest.n_items > train_labels.len() {
            return Err(err(
                &manifest_path,
                format!(
                    "n_items {} but {} training items on disk",
                    manifest.n_items,
                    train_labels.len()
                ),
            ));
        }
        compute_strategy_length(manifest.n_items, manifest.batch_size)
            .map_err(|e| err(&manifest_path, e.to_string()))?;
        let item_order = match manifest.item_order {
            Some(order) => {
                let mut seen = vec![false; manifest.n_items];
                for &i in &order {
                    if i >= manifest.n_items || std::mem::replace(&mut seen[i], true) {
                        return Err(err(
                            &manifest_path,
                            "item_order is not a permutation of 0..n_items".into(),
                        ));
                    }
                }
                if order.len() != manifest.n_items {
                    return Err(err(&manifest_path, "item_order length differs from n_items".into()));
                }
                order
            }
            None => (0..manifest.n_items).collect(),
        };
        let n_classes = train_labels
            .iter()
            .chain(&val_labels)
            .map(|&l| l as usize + 1)
            .max()
            .unwrap_or(0);
        Ok(Self {
            root: dir.to_path_buf(),
            train_images,
            train_labels,
            val_images,
            val_labels,
            n_classes,
            batch_size: manifest.batch_size,
            item_order,
        })
    }

    /// Builds a dataset from in-memory arrays (used by tests and tools).
    pub fn from_parts(
        train_images: Array2<f32>,
        train_labels: Vec<u8>,
        val_images: Array2<f32>,
        val_labels: Vec<u8>,
        batch_size: usize,
    ) -> Result<Self> {
        compute_strategy_length(train_labels.len(), batch_size)?;
        let n_classes = train_labels
            .iter()
            .chain(&val_labels)
            .map(|&l| l as usize + 1)
            .max()
            .unwrap_or(0);
        let n = train_labels.len();
        Ok(Self {
            root: PathBuf::new(),
            train_images,
            train_labels,
            val_images,
            val_labels,
            n_classes,
            batch_size,
            item_order: (0..n).collect(),
        })
    }

    /// The same items regrouped into batches of `batch_size`, keeping the
    /// frozen item order.
    pub fn with_batch_size(&self, batch_size: usize) -> Result<Self> {
        compute_strategy_length(self.n_items(), batch_size)?;
        Ok(Self {
            batch_size,
            ..self.clone()
        })
    }

    pub fn n_items(&self) -> usize {
        self.item_order.len()
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn strategy_len(&self) -> usize {
        self.n_items().div_ceil(self.batch_size)
    }

    /// Item indices of batch `k`, in their frozen order.
    pub fn batch(&self, k: usize) -> &[usize] {
        let start = k * self.batch_size;
        let end = (start + self.batch_size).min(self.n_items());
        &self.item_order[start..end]
    }

    pub fn input_dim(&self) -> usize {
        self.train_images.ncols()
    }
}

fn read_pair(images: &Path, labels: &Path) -> Result<(Array2<f32>, Vec<u8>)> {
    let (img_dims, img) = read_idx(images)?;
    let (lbl_dims, lbl) = read_idx(labels)?;
    if img_dims.len() < 2 || lbl_dims.len() != 1 || img_dims[0] != lbl_dims[0] {
        return Err(TsoError::Dataset {
            path: images.to_path_buf(),
            message: format!("image dims {img_dims:?} incompatible with label dims {lbl_dims:?}"),
        });
    }
    let n = img_dims[0];
    let width: usize = img_dims[1..].iter().product();
    let pixels = Array2::from_shape_vec((n, width), img.into_iter().map(|p| p as f32 / 255.0).collect())
        .expect("sizes checked against header");
    Ok((pixels, lbl))
}

/// Reads an unsigned-byte IDX file, returning its dimensions and payload.
pub fn read_idx(path: &Path) -> Result<(Vec<usize>, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| TsoError::Dataset {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let bad = |message: &str| TsoError::Dataset {
        path: path.to_path_buf(),
        message: message.to_string(),
    };
    if bytes.len() < 4 || bytes[0] != 0 || bytes[1] != 0 {
        return Err(bad("not an IDX file"));
    }
    if bytes[2] != 0x08 {
        return Err(bad("only unsigned-byte IDX payloads are supported"));
    }
    let ndims = bytes[3] as usize;
    let header = 4 + 4 * ndims;
    if bytes.len() < header {
        return Err(bad("truncated IDX header"));
    }
    let dims: Vec<usize> = (0..ndims)
        .map(|i| u32::from_be_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize)
        .collect();
    let len: usize = dims.iter().product();
    if bytes.len() != header + len {
        return Err(bad("IDX payload size does not match header"));
    }
    Ok((dims, bytes[header..].to_vec()))
}

/// Writes an unsigned-byte IDX file.
pub fn write_idx(path: &Path, dims: &[usize], data: &[u8]) -> Result<()> {
    let mut out = vec![0u8, 0, 0x08, dims.len() as u8];
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(data);
    fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_tiny(dir: &Path, n: usize, batch_size: usize, order: Option<Vec<usize>>) {
        let pixels: Vec<u8> = (0..n * 4).map(|i| (i * 7 % 256) as u8).collect();
        let labels: Vec<u8> = (0..n).map(|i| (i % 3) as u8).collect();
        write_idx(&dir.join("ti"), &[n, 2, 2], &pixels).unwrap();
        write_idx(&dir.join("tl"), &[n], &labels).unwrap();
        write_idx(&dir.join("vi"), &[2, 2, 2], &pixels[..8]).unwrap();
        write_idx(&dir.join("vl"), &[2], &labels[..2]).unwrap();
        let manifest = Manifest {
            n_items: n,
            batch_size,
            train_images: "ti".into(),
            train_labels: "tl".into(),
            val_images: "vi".into(),
            val_labels: "vl".into(),
            item_order: order,
        };
        fs::write(dir.join("manifest.json"), serde_json::to_string(&manifest).unwrap()).unwrap();
    }

    #[test]
    fn loads_and_batches() {
        let dir = tempfile::tempdir().unwrap();
        write_tiny(dir.path(), 10, 4, None);
        let ds = Dataset::load(dir.path()).unwrap();
        assert_eq!(ds.strategy_len(), 3);
        assert_eq!(ds.batch(0), &[0, 1, 2, 3]);
        assert_eq!(ds.batch(2), &[8, 9]);
        assert_eq!(ds.input_dim(), 4);
        assert_eq!(ds.n_classes, 3);
        assert!((ds.train_images[[0, 1]] - 7.0 / 255.0).abs() < 1e-7);
        let wide = ds.with_batch_size(5).unwrap();
        assert_eq!((wide.strategy_len(), wide.batch(1)), (2, &[5, 6, 7, 8, 9][..]));
        assert!(ds.with_batch_size(0).is_err());
    }

    #[test]
    fn frozen_item_order_is_respected() {
        let dir = tempfile::tempdir().unwrap();
        write_tiny(dir.path(), 4, 2, Some(vec![3, 1, 0, 2]));
        let ds = Dataset::load(dir.path()).unwrap();
        assert_eq!(ds.batch(0), &[3, 1]);
        assert_eq!(ds.batch(1), &[0, 2]);

        write_tiny(dir.path(), 4, 2, Some(vec![3, 3, 0, 2]));
        assert!(Dataset::load(dir.path()).is_err());
    }

    #[test]
    fn rejects_corrupt_files() {
        let dir = tempfile::tempdir().unwrap();
        write_tiny(dir.path(), 4, 2, None);
        fs::write(dir.path().join("tl"), [0u8, 0, 8, 1, 0, 0, 0, 9, 1]).unwrap();
        assert!(matches!(Dataset::load(dir.path()), Err(TsoError::Dataset { .. })));
        assert!(Dataset::load(&dir.path().join("missing")).is_err());
    }
}
