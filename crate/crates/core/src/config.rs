//! Flat `key=value` run configuration.
//!
//! Lines are `key = value`; `#` starts a comment. Unknown keys are errors.
//! [`TriMixConfig::to_kv_string`] writes every key in a fixed order, so a
//! snapshot fully determines a run.

use std::path::PathBuf;

use crate::data::{AugmentPolicy, DataSource, SyntheticSpec};
use crate::error::{Error, Result};
use crate::model::{parse_widths, Arch};
use crate::objective::{LambdaPolicy, ObjectiveConfig, Placement};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn as_str(self) -> &'static str {
        match self {
            Dtype::F32 => "f32",
            Dtype::F64 => "f64",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Dtype::F32),
            "f64" => Ok(Dtype::F64),
            _ => Err(Error::Config(format!(
                "dtype must be f32 or f64, got {s:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    Synthetic,
    Idx,
    Csv,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            epochs: 100,
            lr: 1e-3,
            momentum: 0.9,
            weight_decay: 1e-6,
            batch: 256,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TriMixConfig {
    pub seed: u64,
    pub objective: ObjectiveConfig,
    /// Encoder widths after the input layer.
    pub encoder: Vec<usize>,
    /// Projector widths after the representation layer.
    pub projector: Vec<usize>,
    pub relu: bool,
    pub batch: usize,
    pub epochs: u64,
    pub lr: f64,
    pub weight_decay: f64,
    pub save_every: u64,
    pub checkpoint_dtype: Dtype,

    pub dataset: DatasetKind,
    pub synthetic_classes: usize,
    pub synthetic_train_n: usize,
    pub synthetic_test_n: usize,
    pub synthetic_grid: usize,
    pub synthetic_seed: u64,
    pub idx_train_images: PathBuf,
    pub idx_train_labels: PathBuf,
    pub idx_test_images: PathBuf,
    pub idx_test_labels: PathBuf,
    pub csv_train: PathBuf,
    pub csv_test: PathBuf,
    pub csv_shape: (usize, usize, usize),
    pub classes: usize,

    pub augment: AugmentPolicy,

    pub knn_k: usize,
    pub probe: ProbeConfig,
    pub finetune_fraction: f64,
    pub finetune_epochs: usize,
}

impl Default for TriMixConfig {
    fn default() -> Self {
        TriMixConfig {
            seed: 0,
            objective: ObjectiveConfig::default(),
            encoder: vec![128, 64],
            projector: vec![64, 64, 32],
            relu: true,
            batch: 64,
            epochs: 50,
            lr: 1e-3,
            weight_decay: 1e-6,
            save_every: 10,
            checkpoint_dtype: Dtype::F64,
            dataset: DatasetKind::Synthetic,
            synthetic_classes: 3,
            synthetic_train_n: 600,
            synthetic_test_n: 300,
            synthetic_grid: 16,
            synthetic_seed: 7,
            idx_train_images: PathBuf::new(),
            idx_train_labels: PathBuf::new(),
            idx_test_images: PathBuf::new(),
            idx_test_labels: PathBuf::new(),
            csv_train: PathBuf::new(),
            csv_test: PathBuf::new(),
            csv_shape: (1, 16, 16),
            classes: 10,
            augment: AugmentPolicy::default(),
            knn_k: 20,
            probe: ProbeConfig::default(),
            finetune_fraction: 0.1,
            finetune_epochs: 100,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("bad value {v:?} for key {key}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("bad boolean {v:?} for key {key}"))),
    }
}

fn widths_str(w: &[usize]) -> String {
    w.iter().map(usize::to_string).collect::<Vec<_>>().join("-")
}

impl TriMixConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = TriMixConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!(
                    "line {}: expected key=value, got {raw:?}",
                    lineno + 1
                ))
            })?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let o = &mut self.objective;
        match key {
            "seed" => self.seed = parse(key, v)?,
            "alpha" => o.alpha = parse(key, v)?,
            "beta" => o.beta = parse(key, v)?,
            "gamma" => o.gamma = parse(key, v)?,
            "tau" => o.tau = parse(key, v)?,
            "lambda_policy" => {
                o.lambda_policy = match v {
                    "uniform" => LambdaPolicy::Uniform,
                    _ => match v.strip_prefix("fixed:") {
                        Some(x) => LambdaPolicy::Fixed(parse(key, x)?),
                        None => {
                            return Err(Error::Config(format!(
                                "lambda_policy must be uniform or fixed:<v>, got {v:?}"
                            )))
                        }
                    },
                }
            }
            "enable_vrt" => o.enable_vrt = parse_bool(key, v)?,
            "enable_con" => o.enable_con = parse_bool(key, v)?,
            "enable_feature_norm" => o.enable_feature_norm = parse_bool(key, v)?,
            "placement" => {
                o.placement = match v {
                    "ZZ" => Placement::ZZ,
                    "YY" => Placement::YY,
                    "ZY" => Placement::ZY,
                    _ => {
                        return Err(Error::Config(format!(
                            "placement must be ZZ, YY or ZY, got {v:?}"
                        )))
                    }
                }
            }
            "normalize_on" => o.normalize_on = parse_bool(key, v)?,
            "allow_degenerate" => o.allow_degenerate = parse_bool(key, v)?,
            "encoder" => self.encoder = parse_widths(v)?,
            "projector" => self.projector = parse_widths(v)?,
            "relu" => self.relu = parse_bool(key, v)?,
            "batch" => self.batch = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "weight_decay" => self.weight_decay = parse(key, v)?,
            "save_every" => self.save_every = parse(key, v)?,
            "checkpoint_dtype" => self.checkpoint_dtype = Dtype::parse(v)?,
            "dataset" => {
                self.dataset = match v {
                    "synthetic" => DatasetKind::Synthetic,
                    "idx" => DatasetKind::Idx,
                    "csv" => DatasetKind::Csv,
                    _ => {
                        return Err(Error::Config(format!(
                            "dataset must be synthetic, idx or csv, got {v:?}"
                        )))
                    }
                }
            }
            "synthetic.classes" => self.synthetic_classes = parse(key, v)?,
            "synthetic.train_n" => self.synthetic_train_n = parse(key, v)?,
            "synthetic.test_n" => self.synthetic_test_n = parse(key, v)?,
            "synthetic.grid" => self.synthetic_grid = parse(key, v)?,
            "synthetic.seed" => self.synthetic_seed = parse(key, v)?,
            "idx.train_images" => self.idx_train_images = v.into(),
            "idx.train_labels" => self.idx_train_labels = v.into(),
            "idx.test_images" => self.idx_test_images = v.into(),
            "idx.test_labels" => self.idx_test_labels = v.into(),
            "csv.train" => self.csv_train = v.into(),
            "csv.test" => self.csv_test = v.into(),
            "csv.shape" => {
                let dims: Vec<usize> = v
                    .split('x')
                    .map(|d| parse(key, d.trim()))
                    .collect::<Result<_>>()?;
                match dims.as_slice() {
                    &[c, h, w] => self.csv_shape = (c, h, w),
                    _ => return Err(Error::Config(format!("csv.shape must be CxHxW, got {v:?}"))),
                }
            }
            "classes" => self.classes = parse(key, v)?,
            "aug.pad" => self.augment.pad = parse(key, v)?,
            "aug.hflip" => self.augment.hflip = parse(key, v)?,
            "aug.brightness" => self.augment.brightness = parse(key, v)?,
            "aug.contrast" => self.augment.contrast = parse(key, v)?,
            "aug.grayscale" => self.augment.grayscale = parse(key, v)?,
            "knn.k" => self.knn_k = parse(key, v)?,
            "probe.epochs" => self.probe.epochs = parse(key, v)?,
            "probe.lr" => self.probe.lr = parse(key, v)?,
            "probe.momentum" => self.probe.momentum = parse(key, v)?,
            "probe.weight_decay" => self.probe.weight_decay = parse(key, v)?,
            "probe.batch" => self.probe.batch = parse(key, v)?,
            "finetune.fraction" => self.finetune_fraction = parse(key, v)?,
            "finetune.epochs" => self.finetune_epochs = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Every key with its current value, in canonical order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let o = &self.objective;
        let (c, h, w) = self.csv_shape;
        vec![
            ("seed", self.seed.to_string()),
            ("alpha", o.alpha.to_string()),
            ("beta", o.beta.to_string()),
            ("gamma", o.gamma.to_string()),
            ("tau", o.tau.to_string()),
            (
                "lambda_policy",
                match o.lambda_policy {
                    LambdaPolicy::Uniform => "uniform".into(),
                    LambdaPolicy::Fixed(v) => format!("fixed:{v}"),
                },
            ),
            ("enable_vrt", o.enable_vrt.to_string()),
            ("enable_con", o.enable_con.to_string()),
            ("enable_feature_norm", o.enable_feature_norm.to_string()),
            ("placement", format!("{:?}", o.placement)),
            ("normalize_on", o.normalize_on.to_string()),
            ("allow_degenerate", o.allow_degenerate.to_string()),
            ("encoder", widths_str(&self.encoder)),
            ("projector", widths_str(&self.projector)),
            ("relu", self.relu.to_string()),
            ("batch", self.batch.to_string()),
            ("epochs", self.epochs.to_string()),
            ("lr", self.lr.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("save_every", self.save_every.to_string()),
            ("checkpoint_dtype", self.checkpoint_dtype.as_str().into()),
            (
                "dataset",
                match self.dataset {
                    DatasetKind::Synthetic => "synthetic",
                    DatasetKind::Idx => "idx",
                    DatasetKind::Csv => "csv",
                }
                .into(),
            ),
            ("synthetic.classes", self.synthetic_classes.to_string()),
            ("synthetic.train_n", self.synthetic_train_n.to_string()),
            ("synthetic.test_n", self.synthetic_test_n.to_string()),
            ("synthetic.grid", self.synthetic_grid.to_string()),
            ("synthetic.seed", self.synthetic_seed.to_string()),
            (
                "idx.train_images",
                self.idx_train_images.display().to_string(),
            ),
            (
                "idx.train_labels",
                self.idx_train_labels.display().to_string(),
            ),
            (
                "idx.test_images",
                self.idx_test_images.display().to_string(),
            ),
            (
                "idx.test_labels",
                self.idx_test_labels.display().to_string(),
            ),
            ("csv.train", self.csv_train.display().to_string()),
            ("csv.test", self.csv_test.display().to_string()),
            ("csv.shape", format!("{c}x{h}x{w}")),
            ("classes", self.classes.to_string()),
            ("aug.pad", self.augment.pad.to_string()),
            ("aug.hflip", self.augment.hflip.to_string()),
            ("aug.brightness", self.augment.brightness.to_string()),
            ("aug.contrast", self.augment.contrast.to_string()),
            ("aug.grayscale", self.augment.grayscale.to_string()),
            ("knn.k", self.knn_k.to_string()),
            ("probe.epochs", self.probe.epochs.to_string()),
            ("probe.lr", self.probe.lr.to_string()),
            ("probe.momentum", self.probe.momentum.to_string()),
            ("probe.weight_decay", self.probe.weight_decay.to_string()),
            ("probe.batch", self.probe.batch.to_string()),
            ("finetune.fraction", self.finetune_fraction.to_string()),
            ("finetune.epochs", self.finetune_epochs.to_string()),
        ]
    }

    pub fn to_kv_string(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }

    /// Short SHA-256 of the canonical snapshot.
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let h = Sha256::digest(self.to_kv_string().as_bytes());
        h.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.objective.validate()?;
        if self.batch == 0 || !self.batch.is_multiple_of(2) {
            return Err(Error::BatchParity(self.batch));
        }
        if self.encoder.is_empty() || self.projector.is_empty() {
            return Err(Error::Config(
                "encoder and projector need at least one layer".into(),
            ));
        }
        if !(self.lr > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::Config("lr must be > 0 and weight_decay >= 0".into()));
        }
        if self.knn_k == 0 {
            return Err(Error::Config("knn.k must be >= 1".into()));
        }
        if !(self.finetune_fraction > 0.0 && self.finetune_fraction <= 1.0) {
            return Err(Error::Config("finetune.fraction must lie in (0, 1]".into()));
        }
        self.augment.validate()
    }

    pub fn arch(&self, input_width: usize) -> Result<Arch> {
        let mut encoder = vec![input_width];
        encoder.extend(&self.encoder);
        let mut projector = vec![*encoder.last().unwrap()];
        projector.extend(&self.projector);
        Arch::new(encoder, projector, self.relu)
    }

    pub fn train_source(&self) -> DataSource {
        self.source(true)
    }

    pub fn test_source(&self) -> DataSource {
        self.source(false)
    }

    fn source(&self, train: bool) -> DataSource {
        match self.dataset {
            DatasetKind::Synthetic => DataSource::Synthetic(SyntheticSpec {
                classes: self.synthetic_classes,
                n: if train {
                    self.synthetic_train_n
                } else {
                    self.synthetic_test_n
                },
                grid: self.synthetic_grid,
                seed: if train {
                    self.synthetic_seed
                } else {
                    crate::rng::derive_seed(self.synthetic_seed, &[u64::from(b't')])
                },
            }),
            DatasetKind::Idx => DataSource::Idx {
                images: if train {
                    &self.idx_train_images
                } else {
                    &self.idx_test_images
                }
                .clone(),
                labels: if train {
                    &self.idx_train_labels
                } else {
                    &self.idx_test_labels
                }
                .clone(),
                classes: self.classes,
            },
            DatasetKind::Csv => DataSource::Csv {
                path: if train {
                    &self.csv_train
                } else {
                    &self.csv_test
                }
                .clone(),
                shape: self.csv_shape,
                classes: self.classes,
            },
        }
    }
}
