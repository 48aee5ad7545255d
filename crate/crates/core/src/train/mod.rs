//! Pretraining loop, optimizer and checkpoints.

mod adam;
mod checkpoint;

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};

pub use adam::{AdamConfig, AdamState};
pub use checkpoint::{Checkpoint, MAGIC, VERSION};

use crate::config::TriMixConfig;
use crate::data::{batches, two_views, Dataset, StreamKey};
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::objective::loss_and_grads;
use crate::rng::{derive_seed, stream, DOMAIN_INIT, DOMAIN_LAMBDA};

pub const METRICS_HEADER: &str = "step,epoch,lambda,l_bt_inv,l_bt_rr,l_vrt,l_con,total";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub epoch: u64,
    pub lambda: f64,
    pub l_bt_inv: f64,
    pub l_bt_rr: f64,
    pub l_vrt: f64,
    pub l_con: f64,
    pub total: f64,
}

impl fmt::Display for MetricsRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{},{},{},{},{},{},{},{}",
            self.step,
            self.epoch,
            self.lambda,
            self.l_bt_inv,
            self.l_bt_rr,
            self.l_vrt,
            self.l_con,
            self.total
        )
    }
}

#[derive(Debug, Default)]
pub struct PretrainOptions {
    /// Where checkpoints, metrics and the config snapshot go. `None` keeps
    /// everything in memory.
    pub out_dir: Option<PathBuf>,
    /// Continue from this state instead of a fresh init.
    pub resume: Option<Checkpoint>,
}

#[derive(Debug)]
pub struct PretrainOutput {
    pub checkpoint: Checkpoint,
    pub metrics: Vec<MetricsRow>,
}

pub fn adam_config(cfg: &TriMixConfig) -> AdamConfig {
    AdamConfig {
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
        ..AdamConfig::default()
    }
}

/// Fresh parameters for `cfg` on inputs of the given width.
pub fn init_params(cfg: &TriMixConfig, input_width: usize) -> Result<ModelParams> {
    ModelParams::init(
        &cfg.arch(input_width)?,
        derive_seed(cfg.seed, &[DOMAIN_INIT]),
    )
}

fn checkpoint_path(dir: &Path, epoch: u64) -> PathBuf {
    dir.join(format!("checkpoint_epoch{epoch:04}.tmx"))
}

/// Train until `cfg.epochs` epochs are complete. Every random draw is keyed
/// off `(seed, epoch, batch)`, so resuming from a checkpoint reproduces an
/// uninterrupted run exactly.
pub fn pretrain(
    cfg: &TriMixConfig,
    train: &Dataset,
    opts: PretrainOptions,
) -> Result<PretrainOutput> {
    cfg.validate()?;
    let arch = cfg.arch(train.input_width())?;
    let snapshot = cfg.to_kv_string();
    let (mut params, mut adam, start) = match opts.resume {
        Some(ck) => {
            if ck.params.arch != arch {
                return Err(Error::ArchMismatch {
                    expected: arch.to_string(),
                    found: ck.params.arch.to_string(),
                });
            }
            if ck.seed != cfg.seed {
                return Err(Error::Config(format!(
                    "checkpoint was trained with seed {} but config has seed {}",
                    ck.seed, cfg.seed
                )));
            }
            (ck.params, ck.adam, ck.epoch)
        }
        None => {
            let p = init_params(cfg, train.input_width())?;
            let a = AdamState::new(adam_config(cfg), &arch.param_shapes());
            (p, a, 0)
        }
    };

    let mut metrics_file = match &opts.out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let snap = dir.join("config.resolved");
            std::fs::write(&snap, &snapshot).map_err(|e| Error::io(&snap, e))?;
            let path = dir.join("metrics.csv");
            let fresh = start == 0 || !path.exists();
            let mut f = std::fs::OpenOptions::new()
                .create(true)
                .write(true)
                .append(!fresh)
                .truncate(fresh)
                .open(&path)
                .map_err(|e| Error::io(&path, e))?;
            if fresh {
                writeln!(f, "{METRICS_HEADER}").map_err(|e| Error::io(&path, e))?;
            }
            Some((f, path))
        }
        None => None,
    };

    let steps_per_epoch = train.len() / cfg.batch;
    let mut metrics = Vec::new();
    let make_ck = |params: &ModelParams, adam: &AdamState, epoch: u64| Checkpoint {
        params: params.clone(),
        adam: adam.clone(),
        epoch,
        seed: cfg.seed,
        dtype: cfg.checkpoint_dtype,
        config: snapshot.clone(),
    };

    for epoch in start..cfg.epochs {
        for (bi, idx) in batches(train.len(), cfg.batch, cfg.seed, epoch)?
            .into_iter()
            .enumerate()
        {
            let step = epoch as usize * steps_per_epoch + bi;
            let with_step = |e: Error| match e {
                Error::Numeric { term, .. } => Error::Numeric {
                    term,
                    step: Some(step),
                },
                other => other,
            };
            let images = train.images.select_rows(&idx);
            let labels: Vec<usize> = idx.iter().map(|&i| train.labels[i]).collect();
            let key = StreamKey {
                seed: cfg.seed,
                epoch,
                batch: bi as u64,
            };
            let views = two_views(&images, &labels, &idx, &cfg.augment, key)?;
            let mut lrng = stream(cfg.seed, &[DOMAIN_LAMBDA, epoch, bi as u64]);
            let (lb, grads) =
                loss_and_grads(&views, &params, &cfg.objective, &mut lrng).map_err(with_step)?;
            if grads.iter().any(|g| !g.is_finite()) {
                return Err(with_step(Error::numeric("gradient")));
            }
            adam.step(&mut params.tensors_mut(), &grads)?;
            let row = MetricsRow {
                step,
                epoch,
                lambda: lb.lambda.value(),
                l_bt_inv: lb.l_bt_inv,
                l_bt_rr: lb.l_bt_rr,
                l_vrt: lb.l_vrt,
                l_con: lb.l_con,
                total: lb.total,
            };
            if let Some((f, path)) = metrics_file.as_mut() {
                writeln!(f, "{row}").map_err(|e| Error::io(path.as_path(), e))?;
            }
            metrics.push(row);
        }
        let done = epoch + 1;
        if let Some(dir) = &opts.out_dir {
            if cfg.save_every > 0 && done % cfg.save_every == 0 {
                make_ck(&params, &adam, done).save(&checkpoint_path(dir, done))?;
            }
        }
    }

    let final_epoch = start.max(cfg.epochs);
    let checkpoint = make_ck(&params, &adam, final_epoch);
    if let Some(dir) = &opts.out_dir {
        checkpoint.save(&dir.join("checkpoint.tmx"))?;
    }
    Ok(PretrainOutput {
        checkpoint,
        metrics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticSpec};

    fn small() -> (TriMixConfig, Dataset) {
        let cfg = TriMixConfig {
            encoder: vec![16, 8],
            projector: vec![8, 8],
            batch: 8,
            epochs: 2,
            seed: 3,
            ..TriMixConfig::default()
        };
        let ds = generate_synthetic(&SyntheticSpec {
            classes: 2,
            n: 24,
            grid: 6,
            seed: 1,
        })
        .unwrap();
        (cfg, ds)
    }

    #[test]
    fn writes_metrics_and_checkpoints() {
        let (mut cfg, ds) = small();
        cfg.save_every = 1;
        let dir = tempfile::tempdir().unwrap();
        let out = pretrain(
            &cfg,
            &ds,
            PretrainOptions {
                out_dir: Some(dir.path().to_path_buf()),
                resume: None,
            },
        )
        .unwrap();
        assert_eq!(out.metrics.len(), 6);
        let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        assert_eq!(csv.lines().next().unwrap(), METRICS_HEADER);
        assert_eq!(csv.lines().count(), 7);
        assert!(dir.path().join("checkpoint_epoch0001.tmx").exists());
        let ck = Checkpoint::load(&dir.path().join("checkpoint.tmx")).unwrap();
        assert_eq!(ck, out.checkpoint);
        assert_eq!(ck.adam.t, 6);
        let resolved = std::fs::read_to_string(dir.path().join("config.resolved")).unwrap();
        assert_eq!(TriMixConfig::parse(&resolved).unwrap(), cfg);
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let (cfg, ds) = small();
        let straight = pretrain(&cfg, &ds, PretrainOptions::default()).unwrap();
        let mut half = cfg.clone();
        half.epochs = 1;
        let first = pretrain(&half, &ds, PretrainOptions::default()).unwrap();
        let ck = Checkpoint::from_bytes(&first.checkpoint.to_bytes()).unwrap();
        let rest = pretrain(
            &cfg,
            &ds,
            PretrainOptions {
                out_dir: None,
                resume: Some(ck),
            },
        )
        .unwrap();
        assert_eq!(rest.checkpoint.params, straight.checkpoint.params);
        assert_eq!(rest.metrics[..], straight.metrics[3..]);
    }

    #[test]
    fn odd_batch_rejected_before_training() {
        let (mut cfg, ds) = small();
        cfg.batch = 7;
        assert!(matches!(
            pretrain(&cfg, &ds, PretrainOptions::default()),
            Err(Error::BatchParity(7))
        ));
    }
}
