//! Dataset sources: seeded Gaussian blobs, CSV tables and IDX image files.
//!
//! Every source is split 80/20 with a seeded shuffle, then standardized
//! per feature with statistics from the training split only.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{OngError, Result};
use crate::matrix::Matrix;
use crate::network::Shape3;
use crate::seed;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const TRAIN_FRACTION: f64 = 0.8;

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub features: Matrix,
    pub labels: Vec<usize>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Split,
    pub test: Split,
    pub n_classes: usize,
    pub sample_shape: Shape3,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LabelColumn {
    Index(usize),
    Name(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum DatasetSource {
    SyntheticBlobs {
        n_samples: usize,
        n_features: usize,
        n_classes: usize,
        /// Falls back to the run's derived data seed.
        seed: Option<u64>,
    },
    Csv {
        path: PathBuf,
        label_column: LabelColumn,
        has_header: bool,
    },
    Idx {
        images_path: PathBuf,
        labels_path: PathBuf,
    },
}

/// Load, split and standardize. `seed` drives the split shuffle and, for
/// blobs without an explicit seed, the generator.
pub fn load_dataset(source: &DatasetSource, seed: u64) -> Result<Dataset> {
    let (features, labels, shape, split_seed) = match source {
        DatasetSource::SyntheticBlobs {
            n_samples,
            n_features,
            n_classes,
            seed: own,
        } => {
            let s = own.unwrap_or(seed);
            let (x, y) = synthetic_blobs(*n_samples, *n_features, *n_classes, s)?;
            (x, y, Shape3::flat(*n_features), seed::derive(s, "split"))
        }
        DatasetSource::Csv {
            path,
            label_column,
            has_header,
        } => {
            let (x, y) = read_csv(path, label_column, *has_header)?;
            let d = x.cols();
            (x, y, Shape3::flat(d), seed::derive(seed, "split"))
        }
        DatasetSource::Idx {
            images_path,
            labels_path,
        } => {
            let (x, y, shape) = read_idx(images_path, labels_path)?;
            (x, y, shape, seed::derive(seed, "split"))
        }
    };
    let n_classes = labels.iter().max().map_or(0, |m| m + 1);
    if n_classes < 2 {
        return Err(OngError::Dataset(format!(
            "need at least 2 classes, found {n_classes}"
        )));
    }
    let (mut train, mut test) = split(&features, &labels, split_seed)?;
    standardize(&mut train, &mut test);
    Ok(Dataset {
        train,
        test,
        n_classes,
        sample_shape: shape,
    })
}

/// Isotropic unit-variance Gaussian clusters around centers drawn from
/// `U(-5, 5)^d`; sample `i` belongs to class `i mod n_classes`.
pub fn synthetic_blobs(
    n_samples: usize,
    n_features: usize,
    n_classes: usize,
    seed: u64,
) -> Result<(Matrix, Vec<usize>)> {
    if n_samples == 0 || n_features == 0 || n_classes < 2 {
        return Err(OngError::Dataset(format!(
            "blobs need samples > 0, features > 0 and classes >= 2 (got {n_samples}, {n_features}, {n_classes})"
        )));
    }
    let mut rng = seed::rng(seed);
    let centers: Vec<Vec<f64>> = (0..n_classes)
        .map(|_| {
            (0..n_features)
                .map(|_| rng.random_range(-5.0..5.0))
                .collect()
        })
        .collect();
    let labels: Vec<usize> = (0..n_samples).map(|i| i % n_classes).collect();
    let mut data = Vec::with_capacity(n_samples * n_features);
    for &y in &labels {
        for c in &centers[y] {
            let z: f64 = StandardNormal.sample(&mut rng);
            data.push(c + z);
        }
    }
    Ok((Matrix::from_vec(n_samples, n_features, data)?, labels))
}

fn split(features: &Matrix, labels: &[usize], seed: u64) -> Result<(Split, Split)> {
    let n = labels.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut seed::rng(seed));
    let n_train = (n as f64 * TRAIN_FRACTION).round() as usize;
    let (tr, te) = idx.split_at(n_train);
    if tr.is_empty() || te.is_empty() {
        return Err(OngError::Dataset(format!(
            "{n} samples leave an empty train or test split"
        )));
    }
    let take = |ids: &[usize]| -> Result<Split> {
        let d = features.cols();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(features.row(i));
        }
        Ok(Split {
            features: Matrix::from_vec(ids.len(), d, data)?,
            labels: ids.iter().map(|&i| labels[i]).collect(),
        })
    };
    Ok((take(tr)?, take(te)?))
}

fn standardize(train: &mut Split, test: &mut Split) {
    let (n, d) = train.features.shape();
    let mut mean = vec![0.0; d];
    for r in 0..n {
        mean.iter_mut()
            .zip(train.features.row(r))
            .for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0; d];
    for r in 0..n {
        var.iter_mut()
            .zip(train.features.row(r))
            .zip(&mean)
            .for_each(|((s, v), m)| *s += (v - m) * (v - m));
    }
    let scale: Vec<f64> = var
        .iter()
        .map(|s| {
            let sd = (s / n as f64).sqrt();
            if sd > 0.0 {
                1.0 / sd
            } else {
                1.0
            }
        })
        .collect();
    for split in [train, test] {
        for r in 0..split.features.rows() {
            split
                .features
                .row_mut(r)
                .iter_mut()
                .zip(&mean)
                .zip(&scale)
                .for_each(|((v, m), s)| *v = (*v - m) * s);
        }
    }
}

fn read_csv(
    path: &Path,
    label_column: &LabelColumn,
    has_header: bool,
) -> Result<(Matrix, Vec<usize>)> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(has_header)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| OngError::Dataset(format!("{}: {e}", path.display())))?;
    let label_idx = match label_column {
        LabelColumn::Index(i) => *i,
        LabelColumn::Name(name) => {
            if !has_header {
                return Err(OngError::Dataset(format!(
                    "label column `{name}` given by name but {} has no header",
                    path.display()
                )));
            }
            let headers = reader
                .headers()
                .map_err(|e| OngError::Dataset(format!("{}: {e}", path.display())))?;
            headers.iter().position(|h| h == name).ok_or_else(|| {
                OngError::Dataset(format!("no column named `{name}` in {}", path.display()))
            })?
        }
    };

    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut width = None;
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| OngError::Dataset(format!("{}: {e}", path.display())))?;
        let line = record.position().map_or(i + 1, |p| p.line() as usize);
        if label_idx >= record.len() {
            return Err(OngError::Dataset(format!(
                "{} line {line}: label column {label_idx} missing ({} columns)",
                path.display(),
                record.len()
            )));
        }
        let w = *width.get_or_insert(record.len());
        if record.len() != w {
            return Err(OngError::Dataset(format!(
                "{} line {line}: {} columns, expected {w}",
                path.display(),
                record.len()
            )));
        }
        for (col, cell) in record.iter().enumerate() {
            if col == label_idx {
                let y: usize = cell.parse().map_err(|_| {
                    OngError::Dataset(format!(
                        "{} line {line}, column {col}: label `{cell}` out of range (expected a non-negative integer)",
                        path.display()
                    ))
                })?;
                labels.push(y);
            } else {
                let v: f64 = cell
                    .parse()
                    .ok()
                    .filter(|v: &f64| v.is_finite())
                    .ok_or_else(|| {
                        OngError::Dataset(format!(
                            "{} line {line}, column {col}: `{cell}` is not a number",
                            path.display()
                        ))
                    })?;
                data.push(v);
            }
        }
    }
    let Some(w) = width else {
        return Err(OngError::Dataset(format!(
            "{} has no data rows",
            path.display()
        )));
    };
    if w < 2 {
        return Err(OngError::Dataset(format!(
            "{} has no feature columns",
            path.display()
        )));
    }
    let m = Matrix::from_vec(labels.len(), w - 1, data)?;
    Ok((m, labels))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| OngError::io(path, e))
}

fn idx_header(bytes: &[u8], path: &Path, magic: u32, dims: usize) -> Result<Vec<usize>> {
    let need = 4 + 4 * dims;
    if bytes.len() < need {
        return Err(OngError::Dataset(format!(
            "{}: truncated IDX header",
            path.display()
        )));
    }
    let word = |i: usize| u32::from_be_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
    let found = word(0);
    if found != magic {
        return Err(OngError::Dataset(format!(
            "{}: IDX magic 0x{found:08x}, expected 0x{magic:08x}",
            path.display()
        )));
    }
    Ok((0..dims).map(|d| word(4 + 4 * d) as usize).collect())
}

fn read_idx(images: &Path, labels: &Path) -> Result<(Matrix, Vec<usize>, Shape3)> {
    let img = read_file(images)?;
    let lab = read_file(labels)?;
    let dims = idx_header(&img, images, IDX_IMAGES_MAGIC, 3)?;
    let (n, h, w) = (dims[0], dims[1], dims[2]);
    let ldims = idx_header(&lab, labels, IDX_LABELS_MAGIC, 1)?;
    if ldims[0] != n {
        return Err(OngError::Dataset(format!(
            "{} images but {} labels",
            n, ldims[0]
        )));
    }
    let pixels = &img[16..];
    if pixels.len() != n * h * w {
        return Err(OngError::Dataset(format!(
            "{}: expected {} pixel bytes, found {}",
            images.display(),
            n * h * w,
            pixels.len()
        )));
    }
    let label_bytes = &lab[8..];
    if label_bytes.len() != n {
        return Err(OngError::Dataset(format!(
            "{}: expected {n} label bytes, found {}",
            labels.display(),
            label_bytes.len()
        )));
    }
    let data = pixels.iter().map(|&p| f64::from(p) / 255.0).collect();
    Ok((
        Matrix::from_vec(n, h * w, data)?,
        label_bytes.iter().map(|&b| usize::from(b)).collect(),
        Shape3::image(1, h, w),
    ))
}
