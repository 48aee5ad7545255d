//! Datasets, two-view augmentation and even-sized batching.

mod augment;
pub mod idx;
mod synthetic;

use std::path::PathBuf;

use rand::seq::SliceRandom;

pub use augment::{augment_image, two_views, AugmentPolicy, StreamKey};
pub use synthetic::{generate as generate_synthetic, SyntheticSpec};

use crate::error::{Error, Result};
use crate::rng::{stream, DOMAIN_SHUFFLE};
use crate::tensor::Tensor;

/// Images in `[0,1]`, shape `N×C×H×W`, with class ids in `[0, classes)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub name: String,
    pub classes: usize,
}

/// One mini-batch as two augmented views. Labels ride along for evaluators only.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewPair {
    pub x: Tensor,
    pub x_prime: Tensor,
    pub labels: Vec<usize>,
}

impl ViewPair {
    pub fn batch_size(&self) -> usize {
        self.x.rows()
    }
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, name: String, classes: usize) -> Result<Self> {
        if images.shape().len() != 4 {
            return Err(Error::contract(format!(
                "dataset images must be N×C×H×W, got {:?}",
                images.shape()
            )));
        }
        if images.rows() != labels.len() {
            return Err(Error::contract(format!(
                "{} images but {} labels",
                images.rows(),
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::contract(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        if images.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::contract("pixel values must lie in [0, 1]"));
        }
        Ok(Dataset {
            images,
            labels,
            name,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `(C, H, W)`
    pub fn image_dims(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    pub fn input_width(&self) -> usize {
        self.images.row_len()
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            images: self.images.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            name: self.name.clone(),
            classes: self.classes,
        }
    }
}

/// Where a dataset split comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Idx {
        images: PathBuf,
        labels: PathBuf,
        classes: usize,
    },
    /// One row per image: label, then `C·H·W` pixel bytes (0–255), row-major.
    Csv {
        path: PathBuf,
        shape: (usize, usize, usize),
        classes: usize,
    },
    Synthetic(SyntheticSpec),
}

pub fn load_dataset(source: &DataSource) -> Result<Dataset> {
    match source {
        DataSource::Idx {
            images,
            labels,
            classes,
        } => {
            let img = idx::parse_images(&idx::read_file(images)?)?;
            let lab = idx::parse_labels(&idx::read_file(labels)?, *classes)?;
            if img.count != lab.len() {
                return Err(Error::format(
                    4,
                    format!("{} images but {} labels", img.count, lab.len()),
                ));
            }
            let data = img.pixels.iter().map(|&p| f64::from(p) / 255.0).collect();
            Dataset::new(
                Tensor::new(vec![img.count, 1, img.rows, img.cols], data)?,
                lab,
                images.display().to_string(),
                *classes,
            )
        }
        DataSource::Csv {
            path,
            shape,
            classes,
        } => load_csv(path, *shape, *classes),
        DataSource::Synthetic(spec) => generate_synthetic(spec),
    }
}

fn load_csv(path: &PathBuf, (c, h, w): (usize, usize, usize), classes: usize) -> Result<Dataset> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let width = c * h * w;
    let mut labels = Vec::new();
    let mut pixels = Vec::new();
    let mut offset = 0u64;
    for (lineno, line) in text.split_inclusive('\n').enumerate() {
        let start = offset;
        offset += line.len() as u64;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split(',').map(str::trim);
        let first = fields.next().unwrap_or_default();
        let label = match first.parse::<usize>() {
            Ok(l) => l,
            // header row
            Err(_) if lineno == 0 => continue,
            Err(_) => return Err(Error::format(start, format!("bad label {first:?}"))),
        };
        if label >= classes {
            return Err(Error::format(
                start,
                format!("label {label} out of range for {classes} classes"),
            ));
        }
        let row: Vec<f64> = fields
            .map(|f| match f.parse::<u8>() {
                Ok(p) => Ok(f64::from(p) / 255.0),
                Err(_) => Err(Error::format(start, format!("bad pixel value {f:?}"))),
            })
            .collect::<Result<_>>()?;
        if row.len() != width {
            return Err(Error::format(
                start,
                format!("expected {width} pixels, found {}", row.len()),
            ));
        }
        labels.push(label);
        pixels.extend(row);
    }
    if labels.is_empty() {
        return Err(Error::format(0, "no data rows"));
    }
    Dataset::new(
        Tensor::new(vec![labels.len(), c, h, w], pixels)?,
        labels,
        path.display().to_string(),
        classes,
    )
}

/// Shuffled, drop-last index batches for one epoch.
pub fn batches(n: usize, batch: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if batch == 0 || !batch.is_multiple_of(2) {
        return Err(Error::BatchParity(batch));
    }
    if batch > n {
        return Err(Error::contract(format!(
            "batch size {batch} exceeds dataset size {n}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream(seed, &[DOMAIN_SHUFFLE, epoch]));
    Ok(order.chunks_exact(batch).map(<[usize]>::to_vec).collect())
}
