use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{stream, DOMAIN_AUGMENT};
use crate::tensor::Tensor;

use super::ViewPair;

/// Stochastic view policy: reflect-pad + random crop, horizontal flip,
/// multiplicative brightness, contrast around the image mean, grayscale.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentPolicy {
    pub pad: usize,
    pub hflip: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub grayscale: f64,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        AugmentPolicy {
            pad: 2,
            hflip: 0.5,
            brightness: 0.4,
            contrast: 0.4,
            grayscale: 0.1,
        }
    }
}

impl AugmentPolicy {
    pub fn identity() -> Self {
        AugmentPolicy {
            pad: 0,
            hflip: 0.0,
            brightness: 0.0,
            contrast: 0.0,
            grayscale: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("hflip", self.hflip), ("grayscale", self.grayscale)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!(
                    "aug.{name} must be a probability, got {p}"
                )));
            }
        }
        for (name, s) in [("brightness", self.brightness), ("contrast", self.contrast)] {
            if !(0.0..=1.0).contains(&s) {
                return Err(Error::Config(format!(
                    "aug.{name} must lie in [0, 1], got {s}"
                )));
            }
        }
        Ok(())
    }
}

/// Identifies one batch inside a run; sample streams hash this with the
/// sample's dataset index and the view number.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamKey {
    pub seed: u64,
    pub epoch: u64,
    pub batch: u64,
}

fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

/// Augment one `C×H×W` image. The draw order is fixed, so a given rng state
/// always produces the same output.
pub fn augment_image(
    img: &[f64],
    (c, h, w): (usize, usize, usize),
    policy: &AugmentPolicy,
    rng: &mut impl Rng,
) -> Vec<f64> {
    let pad = policy.pad as isize;
    let dy = rng.gen_range(0..=2 * policy.pad) as isize - pad;
    let dx = rng.gen_range(0..=2 * policy.pad) as isize - pad;
    let flip = rng.gen::<f64>() < policy.hflip;
    let bright: f64 = rng.gen_range(-1.0..=1.0);
    let contrast: f64 = rng.gen_range(-1.0..=1.0);
    let gray = rng.gen::<f64>() < policy.grayscale;

    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for r in 0..h {
            let sr = reflect(r as isize + dy, h);
            for col in 0..w {
                let scol = reflect(col as isize + dx, w);
                let scol = if flip { w - 1 - scol } else { scol };
                out[(ch * h + r) * w + col] = img[(ch * h + sr) * w + scol];
            }
        }
    }
    if policy.brightness > 0.0 {
        let f = 1.0 + policy.brightness * bright;
        out.iter_mut().for_each(|v| *v *= f);
    }
    if policy.contrast > 0.0 {
        let f = 1.0 + policy.contrast * contrast;
        let mean = out.iter().sum::<f64>() / out.len() as f64;
        out.iter_mut().for_each(|v| *v = (*v - mean) * f + mean);
    }
    if gray && c > 1 {
        let plane = h * w;
        for p in 0..plane {
            let m = (0..c).map(|ch| out[ch * plane + p]).sum::<f64>() / c as f64;
            (0..c).for_each(|ch| out[ch * plane + p] = m);
        }
    }
    out.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    out
}

/// Two independent augmentations of each image of a `B×C×H×W` batch.
///
/// `ids` are the dataset indices of the batch rows; together with `key` and
/// the view number they seed each sample's stream.
pub fn two_views(
    batch: &Tensor,
    labels: &[usize],
    ids: &[usize],
    policy: &AugmentPolicy,
    key: StreamKey,
) -> Result<ViewPair> {
    let shape = batch.shape();
    if shape.len() != 4 {
        return Err(Error::Dimension {
            op: "two_views",
            lhs: shape.to_vec(),
            rhs: vec![0, 0, 0, 0],
        });
    }
    let b = shape[0];
    if !b.is_multiple_of(2) {
        return Err(Error::BatchParity(b));
    }
    if ids.len() != b || labels.len() != b {
        return Err(Error::contract("ids and labels must match the batch size"));
    }
    let dims = (shape[1], shape[2], shape[3]);
    let mut views = [
        Vec::with_capacity(batch.len()),
        Vec::with_capacity(batch.len()),
    ];
    for (i, &id) in ids.iter().enumerate() {
        for (v, out) in views.iter_mut().enumerate() {
            let mut rng = stream(
                key.seed,
                &[DOMAIN_AUGMENT, key.epoch, key.batch, id as u64, v as u64],
            );
            out.extend(augment_image(batch.row(i), dims, policy, &mut rng));
        }
    }
    let [x, x_prime] = views;
    Ok(ViewPair {
        x: Tensor::new(shape.to_vec(), x)?,
        x_prime: Tensor::new(shape.to_vec(), x_prime)?,
        labels: labels.to_vec(),
    })
}
